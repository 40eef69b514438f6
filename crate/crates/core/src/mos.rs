//! Mixture of solutions: `K` dropout views of a compressed feature attend to
//! each other through `L` blocks, and a learned compression token collects
//! the result. The token's final state is the refined code.

use serde::{Deserialize, Serialize};

use crate::arc::{check_layout, generate_on_tape, ArcModel, LossOutput};
use crate::decoderpool::{evenly_spaced_rates, DecoderPool};
use crate::ergc::build_graph;
use crate::error::{ArfcError, Result};
use crate::numkit::{
    block_forward, block_params, dropout, dropout_tensor, embedding_table, normal_init,
    LayerParams, ParamVars, Rng, Tape, Tensor, Var,
};
use crate::objective::ratio_objective;
use crate::tokenizer::Ratio;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosConfig {
    pub solutions: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Learned positional table over the `2K+1` block inputs.
    pub pos_emb: bool,
}

impl Default for MosConfig {
    fn default() -> Self {
        MosConfig {
            solutions: 5,
            blocks: 2,
            heads: 4,
            ffn_mult: 4,
            pos_emb: true,
        }
    }
}

impl MosConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.solutions == 0 || self.blocks == 0 || self.ffn_mult == 0 {
            return Err(ArfcError::config(
                "MoS needs K >= 1, L >= 1 and a positive FFN multiplier",
            ));
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(ArfcError::config(format!(
                "MoS width {dim} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        2 * self.solutions + 1
    }

    pub fn param_count(&self, dim: usize) -> usize {
        let f = dim * self.ffn_mult;
        let block = 4 * dim + 4 * (dim * dim + dim) + (dim * f + f) + (f * dim + dim);
        dim + if self.pos_emb {
            self.seq_len() * dim
        } else {
            0
        } + self.blocks * block
    }
}

/// `K` dropout views of one compressed feature.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionMatrix {
    pub rows: Tensor,
    pub rates: Vec<f64>,
}

/// Row `k` is `f_cmp` under inverted dropout at `rates[k]`, drawn from
/// `rng.derive(k)`.
pub fn make_solutions(f_cmp: &[f64], rates: &[f64], rng: &Rng) -> Result<SolutionMatrix> {
    if rates.is_empty() {
        return Err(ArfcError::invalid("at least one solution is required"));
    }
    let x = Tensor::vector(f_cmp.to_vec());
    let mut data = Vec::with_capacity(rates.len() * f_cmp.len());
    for (k, &rate) in rates.iter().enumerate() {
        data.extend(dropout_tensor(&x, rate, &mut rng.derive(k as u64), true)?.into_data());
    }
    Ok(SolutionMatrix {
        rows: Tensor::matrix(rates.len(), f_cmp.len(), data)?,
        rates: rates.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MosModel {
    config: MosConfig,
    dim: usize,
    params: LayerParams,
}

impl MosModel {
    pub fn init(config: MosConfig, dim: usize, rng: &mut Rng) -> Result<Self> {
        config.validate(dim)?;
        let mut params = LayerParams::new();
        params.insert("token", normal_init(&[dim], 0.02, &mut rng.derive(1)));
        if config.pos_emb {
            params.insert(
                "pos_emb",
                embedding_table(config.seq_len(), dim, &mut rng.derive(2)),
            );
        }
        for l in 0..config.blocks {
            let block = block_params(dim, config.ffn_mult, &mut rng.derive_path(&[3, l as u64]));
            params.extend(block.with_prefix(&format!("blocks.{l}")));
        }
        Ok(MosModel {
            config,
            dim,
            params,
        })
    }

    pub fn from_params(config: MosConfig, dim: usize, params: LayerParams) -> Result<Self> {
        let reference = MosModel::init(config, dim, &mut Rng::new(0))?;
        check_layout(&reference.params, &params, "mos")?;
        Ok(MosModel {
            config,
            dim,
            params,
        })
    }

    pub fn config(&self) -> &MosConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    /// Fixed dropout rates of the `K` training-time solutions.
    pub fn solution_rates(&self) -> Vec<f64> {
        evenly_spaced_rates(self.config.solutions)
    }

    /// Eval-mode refinement of each row of `codes` (`[B, D]`): the `K`
    /// solutions are identical copies of the code.
    pub fn refine_batch(&self, codes: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 256;
        if codes.shape().len() != 2 || codes.cols() != self.dim {
            return Err(ArfcError::shape(format!(
                "expected [B, {}] codes, got {:?}",
                self.dim,
                codes.shape()
            )));
        }
        let mut out = Vec::with_capacity(codes.len());
        for start in (0..codes.rows()).step_by(CHUNK) {
            let end = (start + CHUNK).min(codes.rows());
            let chunk = Tensor::matrix(
                end - start,
                self.dim,
                codes.data()[start * self.dim..end * self.dim].to_vec(),
            )?;
            let mut tape = Tape::new();
            let vars = tape.register(&self.params, false)?;
            let x = tape.constant(chunk)?;
            let solutions = vec![x; self.config.solutions];
            let refined = refine_on_tape(&mut tape, &vars, &self.config, &solutions)?;
            out.extend_from_slice(tape.value(refined).data());
        }
        Tensor::matrix(codes.rows(), self.dim, out)
    }
}

/// Refine one solution matrix into a single `D`-length code.
pub fn mos_refine(model: &MosModel, s: &SolutionMatrix) -> Result<Vec<f64>> {
    if s.rows.rows() != model.config.solutions || s.rows.cols() != model.dim {
        return Err(ArfcError::shape(format!(
            "solution matrix {:?} does not match K={} D={}",
            s.rows.shape(),
            model.config.solutions,
            model.dim
        )));
    }
    let mut tape = Tape::new();
    let vars = tape.register(&model.params, false)?;
    let mut rows = Vec::with_capacity(model.config.solutions);
    for k in 0..model.config.solutions {
        rows.push(tape.constant(Tensor::matrix(1, model.dim, s.rows.row(k).to_vec())?)?);
    }
    let out = refine_on_tape(&mut tape, &vars, &model.config, &rows)?;
    Ok(tape.value(out).data().to_vec())
}

/// Batched refinement; `solutions[k]` is the `[B, D]` matrix of view `k`.
pub fn refine_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &MosConfig,
    solutions: &[Var],
) -> Result<Var> {
    if solutions.len() != cfg.solutions {
        return Err(ArfcError::shape(format!(
            "expected {} solutions, got {}",
            cfg.solutions,
            solutions.len()
        )));
    }
    let k = cfg.solutions;
    let seq = cfg.seq_len();
    let batch = tape.value(solutions[0]).rows();
    let views: Vec<(Var, usize)> = solutions.iter().map(|&s| (s, 1)).collect();
    let mut mixed = tape.concat_seq(&views, batch)?;
    let mut token = tape.tile(vars.get("token")?, batch)?;
    let pos = if cfg.pos_emb {
        Some(tape.tile(vars.get("pos_emb")?, batch)?)
    } else {
        None
    };
    let mut unused = Rng::new(0);
    for l in 0..cfg.blocks {
        let mut parts = views.clone();
        parts.push((mixed, k));
        parts.push((token, 1));
        let mut x = tape.concat_seq(&parts, batch)?;
        if let Some(p) = pos {
            x = tape.add(x, p)?;
        }
        let y = block_forward(
            tape,
            x,
            &vars.scope(&format!("blocks.{l}")),
            batch,
            seq,
            cfg.heads,
            false,
            &mut unused,
            0.0,
            false,
        )?;
        mixed = tape.slice_seq(y, batch, seq, k, k)?;
        token = tape.slice_seq(y, batch, seq, 2 * k, 1)?;
    }
    Ok(token)
}

/// Stage-2 loss output; `arc_grads` are the (all-zero) gradients reaching the
/// frozen compressor.
#[derive(Clone, Debug)]
pub struct MosLossOutput {
    pub loss: LossOutput,
    pub arc_grads: LayerParams,
}

/// Stage-2 objective: frozen ARC codes, `K` training-time dropout views,
/// refinement, then the same per-ratio objective as stage 1 against the MoS
/// decoder pool.
#[allow(clippy::too_many_arguments)]
pub fn mos_forward_loss(
    arc: &ArcModel,
    mos: &MosModel,
    batch: &Tensor,
    ratios: &[Ratio],
    pool: &DecoderPool,
    lambda: f64,
    rng: &Rng,
) -> Result<MosLossOutput> {
    if !arc.is_frozen() {
        return Err(ArfcError::invalid(
            "the compressor must be frozen before training MoS",
        ));
    }
    if batch.rows() < 2 {
        return Err(ArfcError::invalid(
            "relation loss needs a batch of at least two",
        ));
    }
    if ratios.is_empty() {
        return Err(ArfcError::invalid("empty ratio set"));
    }
    let cfg = arc.config();
    if mos.dim != cfg.dim {
        return Err(ArfcError::config(
            "MoS width must equal the feature dimension",
        ));
    }
    let graph = build_graph(batch)?;
    let mut tape = Tape::new();
    // Registered as leaves only so the test suite can observe that nothing
    // flows back past the stop-gradient.
    let arc_vars = tape.register(arc.params(), true)?;
    let x = tape.constant(batch.clone())?;
    let raw = generate_on_tape(&mut tape, &arc_vars, cfg, x, cfg.tokens)?;
    let code = tape.stop_grad(raw)?;
    let mos_vars = tape.register(&mos.params, true)?;
    let view_rng = rng.derive(1);
    let mut views = Vec::with_capacity(mos.config.solutions);
    for (k, rate) in mos.solution_rates().into_iter().enumerate() {
        views.push(dropout(
            &mut tape,
            code,
            rate,
            &mut view_rng.derive(k as u64),
            true,
        )?);
    }
    let refined = refine_on_tape(&mut tape, &mos_vars, &mos.config, &views)?;
    let obj = ratio_objective(
        &mut tape,
        refined,
        x,
        &graph,
        ratios,
        pool,
        lambda,
        &rng.derive(0),
        true,
    )?;
    let grads = tape.backward(obj.total)?;
    Ok(MosLossOutput {
        arc_grads: grads.collect(&arc_vars),
        loss: LossOutput {
            parts: obj.parts,
            model_grads: grads.collect(&mos_vars),
            cluster_grads: obj
                .cluster_vars
                .iter()
                .map(|(j, v)| (*j, grads.collect(v)))
                .collect(),
        },
    })
}
