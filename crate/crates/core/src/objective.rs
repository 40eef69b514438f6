//! Per-ratio reconstruction + relation objective shared by both training
//! stages: for every sampled ratio, truncate the code, decode it with the
//! routed cluster, and add `L_rec + L_aux / M + lambda * L_ERGC`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoderpool::DecoderPool;
use crate::ergc::{ergc_loss_on_tape, RelationGraph};
use crate::error::{ArfcError, Result};
use crate::numkit::{ParamVars, Rng, Tape, Var};
use crate::tokenizer::{ratio_to_token_count, Ratio};

/// Loss components summed over the sampled ratios (and over the batch for
/// the reconstruction terms).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub aux: f64,
    pub ergc: f64,
    pub total: f64,
}

impl LossParts {
    /// `rec + aux / m + lambda * ergc`.
    pub fn reassemble(&self, m: usize, lambda: f64) -> f64 {
        self.rec + self.aux / m as f64 + lambda * self.ergc
    }
}

pub(crate) struct Objective {
    pub total: Var,
    pub parts: LossParts,
    /// Registered parameters of each routed cluster, keyed by kept tokens.
    pub cluster_vars: BTreeMap<usize, ParamVars>,
}

/// Distinct kept-token counts of `ratios`, in order of first appearance.
pub(crate) fn routed_counts(ratios: &[Ratio], tokens: usize) -> Result<Vec<usize>> {
    if ratios.is_empty() {
        return Err(ArfcError::invalid("empty ratio set"));
    }
    let mut counts = Vec::new();
    for &r in ratios {
        let j = ratio_to_token_count(r, tokens);
        if !counts.contains(&j) {
            counts.push(j);
        }
    }
    Ok(counts)
}

/// Build the objective for `code` (`[B, D]`) against the constant originals.
///
/// Dropout views for ratio `j` and auxiliary `m` draw from
/// `rng.derive(j).derive(m)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn ratio_objective(
    tape: &mut Tape,
    code: Var,
    originals: Var,
    original_graph: &RelationGraph,
    ratios: &[Ratio],
    pool: &DecoderPool,
    lambda: f64,
    rng: &Rng,
    train: bool,
) -> Result<Objective> {
    let tokens = pool.tokens();
    let dim = tape.value(code).cols();
    if !dim.is_multiple_of(tokens) {
        return Err(ArfcError::shape("code length not divisible into tokens"));
    }
    let token_dim = dim / tokens;
    let m = pool.aux_count();
    let mut rec_terms = Vec::new();
    let mut aux_terms = Vec::new();
    let mut ergc_terms = Vec::new();
    let mut cluster_vars = BTreeMap::new();
    for j in routed_counts(ratios, tokens)? {
        let cluster = pool.cluster(j)?;
        let vars = tape.register(cluster.params(), train)?;
        let prefix = tape.slice_cols(code, 0, j * token_dim)?;
        let (main, aux) =
            cluster.reconstruct_on_tape(tape, &vars, prefix, &rng.derive(j as u64), train)?;
        let diff = tape.sub(originals, main)?;
        rec_terms.push(tape.sum_sq(diff)?);
        for a in aux {
            let diff = tape.sub(originals, a)?;
            aux_terms.push(tape.sum_sq(diff)?);
        }
        ergc_terms.push(ergc_loss_on_tape(tape, prefix, original_graph)?);
        cluster_vars.insert(j, vars);
    }
    let rec = sum_all(tape, &rec_terms)?;
    let aux = sum_all(tape, &aux_terms)?;
    let ergc = sum_all(tape, &ergc_terms)?;
    let aux_scaled = tape.scale(aux, 1.0 / m as f64)?;
    let ergc_scaled = tape.scale(ergc, lambda)?;
    let partial = tape.add(rec, aux_scaled)?;
    let total = tape.add(partial, ergc_scaled)?;
    let parts = LossParts {
        rec: tape.value(rec).item(),
        aux: tape.value(aux).item(),
        ergc: tape.value(ergc).item(),
        total: tape.value(total).item(),
    };
    Ok(Objective {
        total,
        parts,
        cluster_vars,
    })
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms
        .first()
        .ok_or_else(|| ArfcError::invalid("no loss terms"))?;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}
