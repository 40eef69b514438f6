//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough
//! cached state to run its vector-Jacobian product later. Nodes are only
//! differentiated when some ancestor is a trainable leaf, so frozen
//! parameters and constants cost nothing on the backward pass.

use super::params::LayerParams;
use super::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::error::{ArfcError, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention(Box<AttentionCache>),
    AttendStep(Box<StepCache>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatSeq {
        parts: Vec<(Var, usize)>,
        batch: usize,
    },
    SliceSeq {
        x: Var,
        seq: usize,
        start: usize,
        len: usize,
    },
    Tile {
        x: Var,
        times: usize,
    },
    SelectRow {
        table: Var,
        row: usize,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    SumSq(Var),
    Sum(Var),
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    causal: bool,
    /// Softmax probabilities, `[batch, heads, seq, seq]`.
    probs: Vec<f64>,
    /// Inverted-dropout multipliers on the probabilities, same layout.
    mask: Option<Vec<f64>>,
}

#[derive(Debug)]
struct StepCache {
    q: Var,
    ks: Vec<Var>,
    vs: Vec<Var>,
    heads: usize,
    /// `[batch, heads, positions]`.
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if no path exists.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient or zeros of the right shape.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Collect the gradients of a registered parameter set.
    pub fn collect(&self, vars: &ParamVars) -> LayerParams {
        vars.iter()
            .map(|(name, v)| (name.clone(), self.get_or_zeros(*v)))
            .collect()
    }
}

/// Parameter name to tape variable.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    map: std::collections::BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| ArfcError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// View of the entries under `prefix.` with the prefix stripped.
    pub fn scope(&self, prefix: &str) -> ParamVars {
        let p = format!("{prefix}.");
        ParamVars {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), *v)))
                .collect(),
        }
    }
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ArfcError::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(ArfcError::NonFinite { op: name });
        }
        let tracked = match &op {
            Op::Leaf => true,
            Op::Const => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Const => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::MulConst(x, _)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::SumSq(x)
            | Op::Sum(x)
            | Op::SliceCols { x, .. }
            | Op::SliceSeq { x, .. }
            | Op::Tile { x, .. }
            | Op::RowNormalize { x, .. } => vec![*x],
            Op::SelectRow { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention(c) => vec![c.q, c.k, c.v],
            Op::AttendStep(c) => {
                let mut v = vec![c.q];
                v.extend(&c.ks);
                v.extend(&c.vs);
                v
            }
            Op::ConcatCols(xs) => xs.clone(),
            Op::ConcatSeq { parts, .. } => parts.iter().map(|p| p.0).collect(),
        }
    }

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "leaf")
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Const, "constant")
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// Register every entry of `params` as leaves (trainable)
    /// or constants (frozen).
    pub fn register(&mut self, params: &LayerParams, trainable: bool) -> Result<ParamVars> {
        let mut map = std::collections::BTreeMap::new();
        for (name, t) in params.iter() {
            let v = if trainable {
                self.leaf(t.clone())?
            } else {
                self.constant(t.clone())?
            };
            map.insert(name.clone(), v);
        }
        Ok(ParamVars { map })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        if tb.shape().len() != 2 || tb.shape()[0] != k {
            return Err(ArfcError::shape(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let n = tb.cols();
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a * b^T`, both treated as matrices with equal column counts.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(ArfcError::shape(format!(
                "matmul_bt: {:?} x {:?}^T",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_bt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMulBt(a, b),
            "matmul_bt",
        )
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// `x[r, :] + bias` for every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.len() != c {
            return Err(ArfcError::shape(format!(
                "add_row: {:?} + {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(x, bias), "add_row")
    }

    /// Elementwise product with a constant multiplier (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if factor.len() != tx.len() {
            return Err(ArfcError::shape("mul_const: length mismatch"));
        }
        let data = tx.data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::MulConst(x, factor), "mul_const")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), "scale")
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu_scalar);
        self.push(t, Op::Gelu(x), "gelu")
    }

    /// Normalise each row to zero mean and unit variance, then apply
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != c || tb.len() != c {
            return Err(ArfcError::shape(
                "layer_norm: gain/bias must match last dim",
            ));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if c == 0 {
            return Err(ArfcError::shape("softmax: empty last dim"));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(x), "softmax")
    }

    /// Scaled dot-product attention over `batch` sequences of length `seq`.
    ///
    /// `q`, `k`, `v` are `[batch*seq, W]` with rows ordered batch-major. With
    /// `causal`, position `i` only sees positions `j <= i`. `dropout_mask`,
    /// when given, multiplies the `[batch, heads, seq, seq]` probabilities.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        causal: bool,
        dropout_mask: Option<Vec<f64>>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape(tq, tk, "attention")?;
        same_shape(tq, tv, "attention")?;
        let w = tq.cols();
        if tq.rows() != batch * seq {
            return Err(ArfcError::shape("attention: rows != batch*seq"));
        }
        if heads == 0 || w % heads != 0 {
            return Err(ArfcError::shape(format!(
                "attention: width {w} not divisible by {heads} heads"
            )));
        }
        if let Some(m) = &dropout_mask {
            if m.len() != batch * heads * seq * seq {
                return Err(ArfcError::shape("attention: dropout mask size"));
            }
        }
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * w];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * w + h * dh..][..dh];
                    let span = if causal { i + 1 } else { seq };
                    for j in 0..span {
                        let kj = &kd[(b * seq + j) * w + h * dh..][..dh];
                        scores[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut scores[..span]);
                    let base = ((b * heads + h) * seq + i) * seq;
                    probs[base..base + span].copy_from_slice(&scores[..span]);
                    let orow = &mut out[(b * seq + i) * w + h * dh..][..dh];
                    for j in 0..span {
                        let mut p = probs[base + j];
                        if let Some(m) = &dropout_mask {
                            p *= m[base + j];
                        }
                        let vj = &vd[(b * seq + j) * w + h * dh..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(tq.shape().to_vec(), out)?;
        let cache = AttentionCache {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            causal,
            probs,
            mask: dropout_mask,
        };
        self.push(t, Op::Attention(Box::new(cache)), "attention")
    }

    /// Attention for one new position given the cached keys and values of
    /// every position up to and including it. `q` and each key/value are
    /// `[B, W]`.
    pub fn attend_step(&mut self, q: Var, ks: &[Var], vs: &[Var], heads: usize) -> Result<Var> {
        if ks.is_empty() || ks.len() != vs.len() {
            return Err(ArfcError::shape(
                "attend_step: need matching non-empty key/value lists",
            ));
        }
        let tq = self.value(q);
        let (bsz, w) = (tq.rows(), tq.cols());
        if heads == 0 || w % heads != 0 {
            return Err(ArfcError::shape(format!(
                "attend_step: width {w} not divisible by {heads} heads"
            )));
        }
        for kv in ks.iter().chain(vs) {
            same_shape(tq, self.value(*kv), "attend_step")?;
        }
        let p = ks.len();
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; bsz * heads * p];
        let mut out = vec![0.0; bsz * w];
        let qd = tq.data();
        for b in 0..bsz {
            for h in 0..heads {
                let off = b * w + h * dh;
                let qi = &qd[off..off + dh];
                let base = (b * heads + h) * p;
                let row = &mut probs[base..base + p];
                for (j, kv) in ks.iter().enumerate() {
                    row[j] = dot(qi, &self.nodes[kv.0].value.data()[off..off + dh]) * scale;
                }
                softmax_in_place(row);
                let orow = &mut out[off..off + dh];
                for (j, vv) in vs.iter().enumerate() {
                    let pj = row[j];
                    for (o, &x) in orow
                        .iter_mut()
                        .zip(&self.nodes[vv.0].value.data()[off..off + dh])
                    {
                        *o += pj * x;
                    }
                }
            }
        }
        let t = Tensor::new(tq.shape().to_vec(), out)?;
        let cache = StepCache {
            q,
            ks: ks.to_vec(),
            vs: vs.to_vec(),
            heads,
            probs,
        };
        self.push(t, Op::AttendStep(Box::new(cache)), "attend_step")
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if start + len > c || len == 0 {
            return Err(ArfcError::shape(format!(
                "slice_cols: [{start}, {}) of {c}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        self.push(
            Tensor::new(vec![r, len], out)?,
            Op::SliceCols { x, start },
            "slice_cols",
        )
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self
            .value(
                *xs.first()
                    .ok_or_else(|| ArfcError::shape("concat_cols: empty"))?,
            )
            .rows();
        let mut total = 0;
        for x in xs {
            if self.value(*x).rows() != rows {
                return Err(ArfcError::shape("concat_cols: row mismatch"));
            }
            total += self.value(*x).cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for x in xs {
                out.extend_from_slice(self.value(*x).row(i));
            }
        }
        self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(xs.to_vec()),
            "concat_cols",
        )
    }

    /// Concatenate batch-major sequences along the sequence axis. Each part
    /// is `[batch*len_i, W]`; the result is `[batch*sum(len_i), W]`.
    pub fn concat_seq(&mut self, parts: &[(Var, usize)], batch: usize) -> Result<Var> {
        let w = self
            .value(
                parts
                    .first()
                    .ok_or_else(|| ArfcError::shape("concat_seq: empty"))?
                    .0,
            )
            .cols();
        let mut seq = 0;
        for &(p, len) in parts {
            let t = self.value(p);
            if t.cols() != w || t.rows() != batch * len {
                return Err(ArfcError::shape("concat_seq: part shape"));
            }
            seq += len;
        }
        let mut out = Vec::with_capacity(batch * seq * w);
        for b in 0..batch {
            for &(p, len) in parts {
                let d = self.value(p).data();
                out.extend_from_slice(&d[b * len * w..(b + 1) * len * w]);
            }
        }
        let t = Tensor::new(vec![batch * seq, w], out)?;
        self.push(
            t,
            Op::ConcatSeq {
                parts: parts.to_vec(),
                batch,
            },
            "concat_seq",
        )
    }

    /// Positions `[start, start+len)` of each of the batch-major sequences.
    pub fn slice_seq(
        &mut self,
        x: Var,
        batch: usize,
        seq: usize,
        start: usize,
        len: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        let w = tx.cols();
        if tx.rows() != batch * seq || start + len > seq || len == 0 {
            return Err(ArfcError::shape("slice_seq: bounds"));
        }
        let mut out = Vec::with_capacity(batch * len * w);
        for b in 0..batch {
            out.extend_from_slice(&tx.data()[(b * seq + start) * w..(b * seq + start + len) * w]);
        }
        let t = Tensor::new(vec![batch * len, w], out)?;
        self.push(t, Op::SliceSeq { x, seq, start, len }, "slice_seq")
    }

    /// Repeat a matrix (or vector, as one row) `times` times vertically.
    pub fn tile(&mut self, x: Var, times: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(times * tx.len());
        for _ in 0..times {
            out.extend_from_slice(tx.data());
        }
        self.push(
            Tensor::new(vec![times * r, c], out)?,
            Op::Tile { x, times },
            "tile",
        )
    }

    /// One row of a table as a `[1, W]` matrix.
    pub fn select_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let t = self.value(table);
        if row >= t.rows() {
            return Err(ArfcError::shape(format!(
                "select_row: {row} of {}",
                t.rows()
            )));
        }
        let out = Tensor::new(vec![1, t.cols()], t.row(row).to_vec())?;
        self.push(out, Op::SelectRow { table, row }, "select_row")
    }

    /// Scale each row to unit L2 norm. Zero rows are an error.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(ArfcError::invalid("row_normalize: zero-norm row"));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(t, Op::RowNormalize { x, norms }, "row_normalize")
    }

    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_sq();
        self.push(Tensor::scalar(s), Op::SumSq(x), "sum_sq")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(ArfcError::shape("backward: loss must be a scalar"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_bt_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_at_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_at_acc(g, ta.data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        axpy(gv, g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(tb) {
                        *o += gi * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(ta) {
                        *o += gi * x;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, g, 1.0);
                }
                let c = out.cols();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            Op::MulConst(x, f) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(f) {
                        *o += gi * m;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, g, *c);
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &xv) in gx.iter_mut().zip(g).zip(tx) {
                        *o += gi * gelu_grad(xv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let gd = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for grow in g.chunks(c) {
                        axpy(gb, grow, 1.0);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dh = vec![0.0; c];
                    for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = grow[j] * gd[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let orow = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            orow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (grow, prow)) in g.chunks(c).zip(out.data().chunks(c)).enumerate() {
                        let s: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += prow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::Attention(cache) => self.attention_vjp(cache, g, grads),
            Op::AttendStep(cache) => self.step_vjp(cache, g, grads),
            Op::SliceCols { x, start } => {
                let len = out.cols();
                let c = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, grow) in g.chunks(len).enumerate() {
                        axpy(&mut gx[r * c + start..r * c + start + len], grow, 1.0);
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = out.cols();
                let mut off = 0;
                for x in xs {
                    let c = self.value(*x).cols();
                    if let Some(gx) = self.acc(grads, *x) {
                        for (r, grow) in g.chunks(total).enumerate() {
                            axpy(&mut gx[r * c..(r + 1) * c], &grow[off..off + c], 1.0);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatSeq { parts, batch } => {
                let w = out.cols();
                let seq: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, len) in parts {
                    if let Some(gp) = self.acc(grads, p) {
                        for b in 0..*batch {
                            let src = &g[(b * seq + off) * w..(b * seq + off + len) * w];
                            axpy(&mut gp[b * len * w..(b + 1) * len * w], src, 1.0);
                        }
                    }
                    off += len;
                }
            }
            Op::SliceSeq { x, seq, start, len } => {
                let w = out.cols();
                let batch = out.rows() / len;
                if let Some(gx) = self.acc(grads, *x) {
                    for b in 0..batch {
                        let dst = &mut gx[(b * seq + start) * w..(b * seq + start + len) * w];
                        axpy(dst, &g[b * len * w..(b + 1) * len * w], 1.0);
                    }
                }
            }
            Op::Tile { x, times } => {
                let n = self.value(*x).len();
                if let Some(gx) = self.acc(grads, *x) {
                    for t in 0..*times {
                        axpy(gx, &g[t * n..(t + 1) * n], 1.0);
                    }
                }
            }
            Op::SelectRow { table, row } => {
                let c = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    axpy(&mut gt[row * c..(row + 1) * c], g, 1.0);
                }
            }
            Op::RowNormalize { x, norms } => {
                let c = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (grow, yrow)) in g.chunks(c).zip(out.data().chunks(c)).enumerate() {
                        let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (grow[j] - yrow[j] * s) / norms[r];
                        }
                    }
                }
            }
            Op::SumSq(x) => {
                let tx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(gx, tx, 2.0 * g[0]);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
    }

    fn attention_vjp(&self, c: &AttentionCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tq, tk, tv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let w = tq.cols();
        let (seq, heads) = (c.seq, c.heads);
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; seq];
        for b in 0..c.batch {
            for h in 0..heads {
                for i in 0..seq {
                    let span = if c.causal { i + 1 } else { seq };
                    let base = ((b * heads + h) * seq + i) * seq;
                    let go = &g[(b * seq + i) * w + h * dh..][..dh];
                    for j in 0..span {
                        let vo = (b * seq + j) * w + h * dh;
                        let m = c.mask.as_ref().map_or(1.0, |m| m[base + j]);
                        let pd = c.probs[base + j] * m;
                        dp[j] = dot(go, &vd[vo..vo + dh]) * m;
                        axpy(&mut dv[vo..vo + dh], go, pd);
                    }
                    let p = &c.probs[base..base + span];
                    let s: f64 = p.iter().zip(&dp[..span]).map(|(a, b)| a * b).sum();
                    let qo = (b * seq + i) * w + h * dh;
                    for j in 0..span {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = (b * seq + j) * w + h * dh;
                        axpy(&mut dq[qo..qo + dh], &kd[ko..ko + dh], ds);
                        axpy(&mut dk[ko..ko + dh], &qd[qo..qo + dh], ds);
                    }
                }
            }
        }
        for (v, d) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if let Some(gv) = self.acc(grads, v) {
                axpy(gv, &d, 1.0);
            }
        }
    }

    fn step_vjp(&self, c: &StepCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tq = self.value(c.q);
        let (bsz, w) = (tq.rows(), tq.cols());
        let dh = w / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = c.ks.len();
        let qd = tq.data();
        let mut dq = vec![0.0; qd.len()];
        let mut dk: Vec<Vec<f64>> = (0..p).map(|_| vec![0.0; bsz * w]).collect();
        let mut dv: Vec<Vec<f64>> = (0..p).map(|_| vec![0.0; bsz * w]).collect();
        let mut dp = vec![0.0; p];
        for b in 0..bsz {
            for h in 0..c.heads {
                let off = b * w + h * dh;
                let go = &g[off..off + dh];
                let base = (b * c.heads + h) * p;
                let probs = &c.probs[base..base + p];
                for j in 0..p {
                    let vj = &self.value(c.vs[j]).data()[off..off + dh];
                    dp[j] = dot(go, vj);
                    axpy(&mut dv[j][off..off + dh], go, probs[j]);
                }
                let s: f64 = probs.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..p {
                    let ds = probs[j] * (dp[j] - s) * scale;
                    let kj = &self.value(c.ks[j]).data()[off..off + dh];
                    axpy(&mut dq[off..off + dh], kj, ds);
                    axpy(&mut dk[j][off..off + dh], &qd[off..off + dh], ds);
                }
            }
        }
        if let Some(gq) = self.acc(grads, c.q) {
            axpy(gq, &dq, 1.0);
        }
        for (kv, d) in c.ks.iter().zip(&dk).chain(c.vs.iter().zip(&dv)) {
            if let Some(gv) = self.acc(grads, *kv) {
                axpy(gv, d, 1.0);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}
