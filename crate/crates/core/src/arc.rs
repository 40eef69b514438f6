//! The arbitrary-ratio compressor: a causal transformer that reads the `T`
//! input tokens of a feature and then emits `T` compressed tokens one at a
//! time, feeding each generated token back as the next input.
//!
//! Because generation is causal and deterministic, the first `j` generated
//! tokens never depend on how many more are requested, so every token-aligned
//! prefix of the output is a valid code at a higher compression ratio.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoderpool::DecoderPool;
use crate::ergc::build_graph;
use crate::error::{ArfcError, Result};
use crate::numkit::{
    block_forward, block_params, block_step, embedding_table, layer_norm, linear, linear_params,
    KvCache, LayerParams, ParamVars, Rng, Tape, Tensor, Var,
};
use crate::objective::{ratio_objective, LossParts};
use crate::tokenizer::Ratio;

/// How compressed tokens are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generation {
    /// One token per step, causally conditioned on everything before it.
    #[default]
    Autoregressive,
    /// All output slots at once with bidirectional attention. Only used as an
    /// ablation baseline; it has no prefix guarantee.
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcConfig {
    pub dim: usize,
    pub tokens: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    #[serde(default)]
    pub generation: Generation,
}

impl Default for ArcConfig {
    fn default() -> Self {
        ArcConfig {
            dim: 64,
            tokens: 8,
            width: 32,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            generation: Generation::Autoregressive,
        }
    }
}

impl ArcConfig {
    /// 1024-d features, 16 tokens, 12 layers.
    pub fn paper_scale() -> Self {
        ArcConfig {
            dim: 1024,
            tokens: 16,
            width: 512,
            layers: 12,
            heads: 8,
            ffn_mult: 4,
            generation: Generation::Autoregressive,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.dim / self.tokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.tokens) {
            return Err(ArfcError::config(format!(
                "D={} is not divisible into T={} tokens",
                self.dim, self.tokens
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(ArfcError::config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_mult == 0 {
            return Err(ArfcError::config(
                "need at least one layer and a positive FFN multiplier",
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (w, d, f) = (self.width, self.token_dim(), self.width * self.ffn_mult);
        let block = 4 * w + 4 * (w * w + w) + (w * f + f) + (f * w + w);
        (d * w + w) + 2 * self.tokens * w + self.layers * block + 2 * w + (w * d + d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArcModel {
    config: ArcConfig,
    params: LayerParams,
    frozen: bool,
}

impl ArcModel {
    pub fn init(config: ArcConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (w, d) = (config.width, config.token_dim());
        let mut params = linear_params(d, w, &mut rng.derive(1)).with_prefix("in_proj");
        params.insert(
            "pos_emb",
            embedding_table(2 * config.tokens, w, &mut rng.derive(2)),
        );
        for l in 0..config.layers {
            let block = block_params(w, config.ffn_mult, &mut rng.derive_path(&[3, l as u64]));
            params.extend(block.with_prefix(&format!("blocks.{l}")));
        }
        params.insert("ln_f.g", Tensor::filled(&[w], 1.0));
        params.insert("ln_f.b", Tensor::zeros(&[w]));
        params.extend(linear_params(w, d, &mut rng.derive(4)).with_prefix("out_proj"));
        Ok(ArcModel {
            config,
            params,
            frozen: false,
        })
    }

    /// Rebuild from stored parameters, checking names and shapes against a
    /// freshly initialised model.
    pub fn from_params(config: ArcConfig, params: LayerParams) -> Result<Self> {
        let reference = ArcModel::init(config, &mut Rng::new(0))?;
        check_layout(&reference.params, &params, "arc")?;
        Ok(ArcModel {
            config,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ArcConfig {
        &self.config
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    /// Mutable parameters; fails once the model is frozen.
    pub fn params_mut(&mut self) -> Result<&mut LayerParams> {
        if self.frozen {
            return Err(ArfcError::invalid("ARC parameters are frozen"));
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Generate the first `n_tokens` compressed tokens of every row of
    /// `features` (`[B, D]`). Eval mode; no gradients.
    pub fn generate_batch(&self, features: &Tensor, n_tokens: usize) -> Result<Tensor> {
        const CHUNK: usize = 256;
        if features.shape().len() != 2 || features.cols() != self.config.dim {
            return Err(ArfcError::shape(format!(
                "expected [B, {}] features, got {:?}",
                self.config.dim,
                features.shape()
            )));
        }
        let rows = features.rows();
        let mut out = Vec::with_capacity(rows * n_tokens * self.config.token_dim());
        for start in (0..rows).step_by(CHUNK) {
            let end = (start + CHUNK).min(rows);
            let chunk = Tensor::matrix(
                end - start,
                self.config.dim,
                features.data()[start * self.config.dim..end * self.config.dim].to_vec(),
            )?;
            let mut tape = Tape::new();
            let vars = tape.register(&self.params, false)?;
            let x = tape.constant(chunk)?;
            let code = generate_on_tape(&mut tape, &vars, &self.config, x, n_tokens)?;
            out.extend_from_slice(tape.value(code).data());
        }
        Tensor::matrix(rows, n_tokens * self.config.token_dim(), out)
    }
}

/// Compress a single feature into its first `n_tokens` generated tokens.
///
/// `train` only decides whether parameters are recorded as differentiable;
/// the compressor itself has no stochastic layers.
pub fn arc_generate(model: &ArcModel, f: &[f64], n_tokens: usize, train: bool) -> Result<Vec<f64>> {
    if f.len() != model.config.dim {
        return Err(ArfcError::shape(format!(
            "feature length {} != {}",
            f.len(),
            model.config.dim
        )));
    }
    let mut tape = Tape::new();
    let vars = tape.register(&model.params, train)?;
    let x = tape.constant(Tensor::matrix(1, f.len(), f.to_vec())?)?;
    let code = generate_on_tape(&mut tape, &vars, &model.config, x, n_tokens)?;
    Ok(tape.value(code).data().to_vec())
}

pub(crate) fn check_layout(
    reference: &LayerParams,
    params: &LayerParams,
    what: &str,
) -> Result<()> {
    for (name, t) in reference.iter() {
        let got = params.get(name)?;
        if got.shape() != t.shape() {
            return Err(ArfcError::shape(format!(
                "{what} parameter {name}: {:?} vs {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if params.len() != reference.len() {
        let extra = params
            .names()
            .find(|n| !reference.contains(n))
            .cloned()
            .unwrap_or_default();
        return Err(ArfcError::config(format!(
            "unexpected {what} parameter `{extra}`"
        )));
    }
    Ok(())
}

/// Compressed tokens for a batch `features` (`[B, D]`), returned as
/// `[B, n_tokens * d]`.
pub fn generate_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ArcConfig,
    features: Var,
    n_tokens: usize,
) -> Result<Var> {
    if n_tokens == 0 || n_tokens > cfg.tokens {
        return Err(ArfcError::invalid(format!(
            "n_tokens {n_tokens} outside [1, {}]",
            cfg.tokens
        )));
    }
    if tape.value(features).cols() != cfg.dim {
        return Err(ArfcError::shape(
            "feature width does not match the compressor",
        ));
    }
    match cfg.generation {
        Generation::Autoregressive => generate_causal(tape, vars, cfg, features, n_tokens),
        Generation::Parallel => generate_parallel(tape, vars, cfg, features, n_tokens),
    }
}

fn embed(tape: &mut Tape, vars: &ParamVars, token: Var, position: usize) -> Result<Var> {
    let h = linear(tape, token, vars.get("in_proj.w")?, vars.get("in_proj.b")?)?;
    let pos = tape.select_row(vars.get("pos_emb")?, position)?;
    tape.add_row(h, pos)
}

fn head(tape: &mut Tape, vars: &ParamVars, state: Var) -> Result<Var> {
    let h = layer_norm(tape, state, &vars.scope("ln_f"))?;
    linear(tape, h, vars.get("out_proj.w")?, vars.get("out_proj.b")?)
}

fn generate_causal(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ArcConfig,
    features: Var,
    n_tokens: usize,
) -> Result<Var> {
    let d = cfg.token_dim();
    let blocks: Vec<ParamVars> = (0..cfg.layers)
        .map(|l| vars.scope(&format!("blocks.{l}")))
        .collect();
    let mut caches = vec![KvCache::default(); cfg.layers];
    let mut outputs = Vec::with_capacity(n_tokens);
    let mut input = tape.slice_cols(features, 0, d)?;
    // Position p holds input token p for p < T, then generated token p - T.
    for p in 0..cfg.tokens + n_tokens - 1 {
        let mut x = embed(tape, vars, input, p)?;
        for (block, cache) in blocks.iter().zip(caches.iter_mut()) {
            x = block_step(tape, x, block, cfg.heads, cache)?;
        }
        if p + 1 < cfg.tokens {
            input = tape.slice_cols(features, (p + 1) * d, d)?;
        } else {
            input = head(tape, vars, x)?;
            outputs.push(input);
        }
    }
    tape.concat_cols(&outputs)
}

fn generate_parallel(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ArcConfig,
    features: Var,
    n_tokens: usize,
) -> Result<Var> {
    let d = cfg.token_dim();
    let batch = tape.value(features).rows();
    let seq = cfg.tokens + n_tokens;
    let mut parts = Vec::with_capacity(seq);
    for p in 0..cfg.tokens {
        let token = tape.slice_cols(features, p * d, d)?;
        parts.push((embed(tape, vars, token, p)?, 1));
    }
    // output slots carry only their positional embedding
    let blank = tape.constant(Tensor::zeros(&[batch, d]))?;
    for p in cfg.tokens..seq {
        parts.push((embed(tape, vars, blank, p)?, 1));
    }
    let mut x = tape.concat_seq(&parts, batch)?;
    let mut unused = Rng::new(0);
    for l in 0..cfg.layers {
        x = block_forward(
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
    }
    let mut outputs = Vec::with_capacity(n_tokens);
    for p in cfg.tokens..seq {
        let state = tape.slice_seq(x, batch, seq, p, 1)?;
        outputs.push(head(tape, vars, state)?);
    }
    tape.concat_cols(&outputs)
}

/// Loss value, its components and the gradients of one stage-1 step.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub parts: LossParts,
    /// Gradients of the trained model (ARC here, MoS in stage 2).
    pub model_grads: LayerParams,
    /// Gradients of each routed decoder cluster, keyed by retained tokens.
    pub cluster_grads: BTreeMap<usize, LayerParams>,
}

/// Stage-1 objective over a batch (`[B, D]`, `B >= 2`): for each ratio, the
/// routed cluster's reconstruction and auxiliary losses plus `lambda` times
/// the relation-graph penalty on the truncated codes.
pub fn arc_forward_loss(
    model: &ArcModel,
    batch: &Tensor,
    ratios: &[Ratio],
    pool: &DecoderPool,
    lambda: f64,
    rng: &Rng,
) -> Result<LossOutput> {
    if batch.rows() < 2 {
        return Err(ArfcError::invalid(
            "relation loss needs a batch of at least two",
        ));
    }
    if ratios.is_empty() {
        return Err(ArfcError::invalid("empty ratio set"));
    }
    let cfg = &model.config;
    let graph = build_graph(batch)?;
    let mut tape = Tape::new();
    let vars = tape.register(&model.params, !model.frozen)?;
    let x = tape.constant(batch.clone())?;
    let code = generate_on_tape(&mut tape, &vars, cfg, x, cfg.tokens)?;
    let obj = ratio_objective(&mut tape, code, x, &graph, ratios, pool, lambda, rng, true)?;
    let grads = tape.backward(obj.total)?;
    Ok(LossOutput {
        parts: obj.parts,
        model_grads: grads.collect(&vars),
        cluster_grads: obj
            .cluster_vars
            .iter()
            .map(|(j, v)| (*j, grads.collect(v)))
            .collect(),
    })
}
