//! Per-ratio decoder clusters used to supervise compression during training.
//!
//! Each retained token count `j` owns one cluster: a main linear decoder and
//! `M` auxiliary linear decoders, all mapping `j*d` values back to `D`. The
//! auxiliaries see inverted-dropout views of the code at fixed rates evenly
//! spaced in `[0.1, 0.9]`. Nothing here runs at inference time.

use std::cell::Cell;
use std::collections::BTreeMap;

use crate::error::{ArfcError, Result};
use crate::numkit::{
    dropout, dropout_tensor, linear, linear_params, LayerParams, ParamVars, Rng, Tape, Tensor, Var,
};
use crate::tokenizer::{ratio_to_token_count, Ratio};

thread_local! {
    static ACTIVATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of decoder forward passes run on this thread so far.
pub fn decoder_activations() -> u64 {
    ACTIVATIONS.with(Cell::get)
}

fn record_activation() {
    ACTIVATIONS.with(|c| c.set(c.get() + 1));
}

/// `m` dropout rates evenly spaced over `[0.1, 0.9]`; a single rate is `0.5`.
pub fn evenly_spaced_rates(m: usize) -> Vec<f64> {
    match m {
        0 => vec![],
        1 => vec![0.5],
        _ => (0..m)
            .map(|i| 0.1 + 0.8 * i as f64 / (m - 1) as f64)
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderCluster {
    kept_tokens: usize,
    input_len: usize,
    output_len: usize,
    aux_rates: Vec<f64>,
    params: LayerParams,
}

impl DecoderCluster {
    pub fn init(
        kept_tokens: usize,
        token_dim: usize,
        dim: usize,
        aux: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if aux == 0 {
            return Err(ArfcError::config(
                "decoder cluster needs at least one auxiliary decoder",
            ));
        }
        let input_len = kept_tokens * token_dim;
        let mut params = linear_params(input_len, dim, rng).with_prefix("main");
        for m in 0..aux {
            params.extend(linear_params(input_len, dim, rng).with_prefix(&format!("aux.{m}")));
        }
        Ok(DecoderCluster {
            kept_tokens,
            input_len,
            output_len: dim,
            aux_rates: evenly_spaced_rates(aux),
            params,
        })
    }

    pub fn kept_tokens(&self) -> usize {
        self.kept_tokens
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn aux_count(&self) -> usize {
        self.aux_rates.len()
    }

    pub fn aux_rates(&self) -> &[f64] {
        &self.aux_rates
    }

    /// Override the auxiliary dropout rates (must stay inside `[0, 1)`).
    pub fn set_aux_rates(&mut self, rates: Vec<f64>) -> Result<()> {
        if rates.len() != self.aux_rates.len() || rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(ArfcError::config(
                "aux rates must match M and lie in [0, 1)",
            ));
        }
        self.aux_rates = rates;
        Ok(())
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        &mut self.params
    }

    /// Main reconstruction plus one reconstruction per auxiliary view.
    pub fn reconstruct(
        &self,
        code: &[f64],
        rng: &Rng,
        train: bool,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if code.len() != self.input_len {
            return Err(ArfcError::shape(format!(
                "cluster for {} tokens expects {} values, got {}",
                self.kept_tokens,
                self.input_len,
                code.len()
            )));
        }
        let x = Tensor::matrix(1, code.len(), code.to_vec())?;
        record_activation();
        let main = self.apply("main", &x)?;
        let mut aux = Vec::with_capacity(self.aux_rates.len());
        for (m, &rate) in self.aux_rates.iter().enumerate() {
            let view = dropout_tensor(&x, rate, &mut rng.derive(m as u64), train)?;
            aux.push(self.apply(&format!("aux.{m}"), &view)?);
        }
        Ok((main, aux))
    }

    fn apply(&self, name: &str, x: &Tensor) -> Result<Vec<f64>> {
        let w = self.params.get(&format!("{name}.w"))?;
        let b = self.params.get(&format!("{name}.b"))?;
        let mut out = b.data().to_vec();
        for (i, &xi) in x.data().iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wv;
            }
        }
        Ok(out)
    }

    /// Batched reconstruction on a tape. `code` is `[B, j*d]`; `vars` are this
    /// cluster's registered parameters. The view for auxiliary `m` uses
    /// `rng.derive(m)`.
    pub fn reconstruct_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        code: Var,
        rng: &Rng,
        train: bool,
    ) -> Result<(Var, Vec<Var>)> {
        if tape.value(code).cols() != self.input_len {
            return Err(ArfcError::shape("decoder input length mismatch"));
        }
        record_activation();
        let main = linear(tape, code, vars.get("main.w")?, vars.get("main.b")?)?;
        let mut aux = Vec::with_capacity(self.aux_rates.len());
        for (m, &rate) in self.aux_rates.iter().enumerate() {
            let view = dropout(tape, code, rate, &mut rng.derive(m as u64), train)?;
            aux.push(linear(
                tape,
                view,
                vars.get(&format!("aux.{m}.w"))?,
                vars.get(&format!("aux.{m}.b"))?,
            )?);
        }
        Ok((main, aux))
    }
}

/// Closed-form parameter count of one cluster.
pub fn cluster_param_count(kept_tokens: usize, token_dim: usize, dim: usize, aux: usize) -> usize {
    (aux + 1) * (kept_tokens * token_dim * dim + dim)
}

/// One cluster per retained token count `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderPool {
    tokens: usize,
    token_dim: usize,
    dim: usize,
    clusters: BTreeMap<usize, DecoderCluster>,
}

impl DecoderPool {
    pub fn init(dim: usize, tokens: usize, aux: usize, rng: &mut Rng) -> Result<Self> {
        if tokens == 0 || !dim.is_multiple_of(tokens) {
            return Err(ArfcError::config(format!(
                "dimension {dim} not divisible into {tokens} tokens"
            )));
        }
        let token_dim = dim / tokens;
        let mut clusters = BTreeMap::new();
        for j in 1..=tokens {
            clusters.insert(
                j,
                DecoderCluster::init(j, token_dim, dim, aux, &mut rng.derive(j as u64))?,
            );
        }
        Ok(DecoderPool {
            tokens,
            token_dim,
            dim,
            clusters,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn aux_count(&self) -> usize {
        self.clusters
            .values()
            .next()
            .map_or(0, DecoderCluster::aux_count)
    }

    /// Cluster dedicated to the grid point of `r`.
    pub fn route(&self, r: Ratio) -> Result<&DecoderCluster> {
        self.cluster(ratio_to_token_count(r, self.tokens))
    }

    pub fn cluster(&self, kept_tokens: usize) -> Result<&DecoderCluster> {
        self.clusters.get(&kept_tokens).ok_or_else(|| {
            ArfcError::config(format!("no decoder cluster for {kept_tokens} tokens"))
        })
    }

    pub fn cluster_mut(&mut self, kept_tokens: usize) -> Result<&mut DecoderCluster> {
        self.clusters.get_mut(&kept_tokens).ok_or_else(|| {
            ArfcError::config(format!("no decoder cluster for {kept_tokens} tokens"))
        })
    }

    pub fn clusters(&self) -> impl Iterator<Item = &DecoderCluster> {
        self.clusters.values()
    }

    /// Every cluster's parameters under `j{tokens}.`.
    pub fn params(&self) -> LayerParams {
        let mut all = LayerParams::new();
        for (j, c) in &self.clusters {
            all.extend(c.params.with_prefix(&format!("j{j}")));
        }
        all
    }

    /// Replace cluster parameters from a flat set produced by [`params`](Self::params).
    pub fn load_params(&mut self, flat: &LayerParams) -> Result<()> {
        for (j, c) in self.clusters.iter_mut() {
            let p = flat.strip_prefix(&format!("j{j}"));
            for (name, t) in c.params.iter_mut() {
                let src = p.get(name)?;
                if src.shape() != t.shape() {
                    return Err(ArfcError::shape(format!(
                        "decoder j{j}.{name} shape {:?}",
                        src.shape()
                    )));
                }
                *t = src.clone();
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.clusters.values().map(|c| c.params.count()).sum()
    }
}

/// `L_rec = ||f - f_rec||^2` and `L_aux = sum_m ||f - f_aux_m||^2`.
pub fn reconstruction_losses(
    original: &[f64],
    main: &[f64],
    aux: &[Vec<f64>],
) -> Result<(f64, f64)> {
    let sq = |a: &[f64], b: &[f64]| -> Result<f64> {
        if a.len() != b.len() {
            return Err(ArfcError::shape("reconstruction length mismatch"));
        }
        Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
    };
    let rec = sq(original, main)?;
    let mut total = 0.0;
    for a in aux {
        total += sq(original, a)?;
    }
    Ok((rec, total))
}
