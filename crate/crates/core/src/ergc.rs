//! Entity relation graphs: batch-level cosine-similarity matrices and the
//! squared-Frobenius penalty between original and compressed graphs.

use serde::{Deserialize, Serialize};

use crate::error::{ArfcError, Result};
use crate::numkit::{Tape, Tensor, Var};

/// `B x B` matrix of pairwise cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationGraph {
    edges: Tensor,
}

impl RelationGraph {
    pub fn edges(&self) -> &Tensor {
        &self.edges
    }

    pub fn size(&self) -> usize {
        self.edges.rows()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.edges.data()[a * self.size() + b]
    }

    /// Row-major CSV with header `b0..b{B-1}`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record((0..self.size()).map(|i| format!("b{i}")))?;
        for a in 0..self.size() {
            w.write_record(self.edges.row(a).iter().map(|v| v.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| ArfcError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Cosine-similarity graph over the rows of `batch` (`B x n`, `B >= 2`).
pub fn build_graph(batch: &Tensor) -> Result<RelationGraph> {
    let (b, n) = (batch.rows(), batch.cols());
    if b < 2 {
        return Err(ArfcError::invalid(
            "relation graph needs at least two entities",
        ));
    }
    let mut unit = Vec::with_capacity(b * n);
    for i in 0..b {
        let row = batch.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(ArfcError::invalid(format!(
                "entity {i} has a zero-norm feature"
            )));
        }
        unit.extend(row.iter().map(|v| v / norm));
    }
    let mut edges = vec![0.0; b * b];
    for i in 0..b {
        for j in i..b {
            let s: f64 = unit[i * n..(i + 1) * n]
                .iter()
                .zip(&unit[j * n..(j + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
            let s = s.clamp(-1.0, 1.0);
            edges[i * b + j] = s;
            edges[j * b + i] = s;
        }
    }
    Ok(RelationGraph {
        edges: Tensor::matrix(b, b, edges)?,
    })
}

/// `||E_ori - E_cmp||_F^2`.
pub fn ergc_loss(original: &RelationGraph, compressed: &RelationGraph) -> Result<f64> {
    if original.size() != compressed.size() {
        return Err(ArfcError::shape(format!(
            "relation graphs of size {} and {}",
            original.size(),
            compressed.size()
        )));
    }
    Ok(original
        .edges
        .data()
        .iter()
        .zip(compressed.edges.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Differentiable graph of `codes` (`B x n`) on a tape.
pub fn graph_on_tape(tape: &mut Tape, codes: Var) -> Result<Var> {
    if tape.value(codes).rows() < 2 {
        return Err(ArfcError::invalid(
            "relation graph needs at least two entities",
        ));
    }
    let unit = tape.row_normalize(codes)?;
    tape.matmul_bt(unit, unit)
}

/// Differentiable ERGC penalty of `codes` against a fixed original graph.
pub fn ergc_loss_on_tape(tape: &mut Tape, codes: Var, original: &RelationGraph) -> Result<Var> {
    let g = graph_on_tape(tape, codes)?;
    if tape.value(g).shape() != original.edges.shape() {
        return Err(ArfcError::shape("relation graph size mismatch"));
    }
    let target = tape.constant(original.edges.clone())?;
    let diff = tape.sub(g, target)?;
    tape.sum_sq(diff)
}

/// Agreement between the relation structure of two aligned batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationReport {
    /// Mean `|E_ori - E_cmp|` over off-diagonal entries.
    pub agreement_error: f64,
    /// Mean off-diagonal similarity of the original batch.
    pub mean_similarity_original: f64,
    /// Mean off-diagonal similarity of the compressed batch.
    pub mean_similarity_compressed: f64,
}

pub fn relation_score(original: &Tensor, compressed: &Tensor) -> Result<RelationReport> {
    if original.rows() != compressed.rows() {
        return Err(ArfcError::shape("relation_score: batches are not aligned"));
    }
    let go = build_graph(original)?;
    let gc = build_graph(compressed)?;
    let b = go.size();
    let (mut err, mut so, mut sc) = (0.0, 0.0, 0.0);
    for i in 0..b {
        for j in 0..b {
            if i != j {
                err += (go.get(i, j) - gc.get(i, j)).abs();
                so += go.get(i, j);
                sc += gc.get(i, j);
            }
        }
    }
    let pairs = (b * (b - 1)) as f64;
    Ok(RelationReport {
        agreement_error: err / pairs,
        mean_similarity_original: so / pairs,
        mean_similarity_compressed: sc / pairs,
    })
}
