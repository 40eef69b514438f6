//! Neural building blocks composed from tape operations.

use super::params::{normal_init, xavier_uniform, LayerParams};
use super::rng::Rng;
use super::tape::{ParamVars, Tape, Var};
use super::tensor::Tensor;
use crate::error::{ArfcError, Result};

pub const LN_EPS: f64 = 1e-5;

/// Inverted-dropout multipliers: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect())
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(ArfcError::invalid(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Dropout on a tape variable. Identity when `rate == 0` or `!train`.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut Rng, train: bool) -> Result<Var> {
    check_rate(rate)?;
    if !train || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).len(), rate, rng)?;
    tape.mul_const(x, mask)
}

/// Dropout on a plain tensor.
pub fn dropout_tensor(x: &Tensor, rate: f64, rng: &mut Rng, train: bool) -> Result<Tensor> {
    check_rate(rate)?;
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `x * w + b` with `w: [in, out]`, `b: [out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub fn linear_params(fan_in: usize, fan_out: usize, rng: &mut Rng) -> LayerParams {
    let mut p = LayerParams::new();
    p.insert("w", xavier_uniform(fan_in, fan_out, rng));
    p.insert("b", Tensor::zeros(&[fan_out]));
    p
}

fn norm_params(width: usize) -> LayerParams {
    let mut p = LayerParams::new();
    p.insert("g", Tensor::filled(&[width], 1.0));
    p.insert("b", Tensor::zeros(&[width]));
    p
}

pub fn layer_norm(tape: &mut Tape, x: Var, p: &ParamVars) -> Result<Var> {
    tape.layer_norm(x, p.get("g")?, p.get("b")?, LN_EPS)
}

/// Parameters of one pre-norm transformer block of the given width.
pub fn block_params(width: usize, ffn_mult: usize, rng: &mut Rng) -> LayerParams {
    let mut p = LayerParams::new();
    p.extend(norm_params(width).with_prefix("ln1"));
    p.extend(norm_params(width).with_prefix("ln2"));
    for name in ["q", "k", "v", "o"] {
        let lp = linear_params(width, width, rng);
        p.insert(format!("attn.w{name}"), lp.get("w").unwrap().clone());
        p.insert(format!("attn.b{name}"), lp.get("b").unwrap().clone());
    }
    p.extend(linear_params(width, width * ffn_mult, rng).with_prefix("ffn.l1"));
    p.extend(linear_params(width * ffn_mult, width, rng).with_prefix("ffn.l2"));
    p
}

/// Learned table initialised with small Gaussian entries.
pub fn embedding_table(rows: usize, width: usize, rng: &mut Rng) -> Tensor {
    normal_init(&[rows, width], 0.02, rng)
}

fn qkv(tape: &mut Tape, x: Var, attn: &ParamVars) -> Result<(Var, Var, Var)> {
    let q = linear(tape, x, attn.get("wq")?, attn.get("bq")?)?;
    let k = linear(tape, x, attn.get("wk")?, attn.get("bk")?)?;
    let v = linear(tape, x, attn.get("wv")?, attn.get("bv")?)?;
    Ok((q, k, v))
}

/// Multi-head self-attention over `batch` sequences of length `seq`.
///
/// `x` is `[batch*seq, W]`; `attn` holds `wq..wo`, `bq..bo`.
#[allow(clippy::too_many_arguments)]
pub fn mhsa(
    tape: &mut Tape,
    x: Var,
    attn: &ParamVars,
    batch: usize,
    seq: usize,
    heads: usize,
    causal: bool,
    rng: &mut Rng,
    attn_dropout: f64,
    train: bool,
) -> Result<Var> {
    let (q, k, v) = qkv(tape, x, attn)?;
    let mask = if train && attn_dropout > 0.0 {
        Some(dropout_mask(batch * heads * seq * seq, attn_dropout, rng)?)
    } else {
        check_rate(attn_dropout)?;
        None
    };
    let a = tape.attention(q, k, v, batch, seq, heads, causal, mask)?;
    linear(tape, a, attn.get("wo")?, attn.get("bo")?)
}

fn ffn(tape: &mut Tape, x: Var, p: &ParamVars) -> Result<Var> {
    let h = linear(tape, x, p.get("ffn.l1.w")?, p.get("ffn.l1.b")?)?;
    let h = tape.gelu(h)?;
    linear(tape, h, p.get("ffn.l2.w")?, p.get("ffn.l2.b")?)
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    p: &ParamVars,
    batch: usize,
    seq: usize,
    heads: usize,
    causal: bool,
    rng: &mut Rng,
    attn_dropout: f64,
    train: bool,
) -> Result<Var> {
    let h = layer_norm(tape, x, &p.scope("ln1"))?;
    let a = mhsa(
        tape,
        h,
        &p.scope("attn"),
        batch,
        seq,
        heads,
        causal,
        rng,
        attn_dropout,
        train,
    )?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, x, &p.scope("ln2"))?;
    let f = ffn(tape, h, p)?;
    tape.add(x, f)
}

/// Keys and values of every position processed so far, one entry per position.
#[derive(Default, Clone)]
pub struct KvCache {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// Advance a causal block by one position. `x` is `[B, W]`; the position's
/// key/value are appended to `cache` before attending, so the new position
/// sees itself and everything before it.
pub fn block_step(
    tape: &mut Tape,
    x: Var,
    p: &ParamVars,
    heads: usize,
    cache: &mut KvCache,
) -> Result<Var> {
    let h = layer_norm(tape, x, &p.scope("ln1"))?;
    let attn = p.scope("attn");
    let (q, k, v) = qkv(tape, h, &attn)?;
    cache.keys.push(k);
    cache.values.push(v);
    let a = tape.attend_step(q, &cache.keys, &cache.values, heads)?;
    let a = linear(tape, a, attn.get("wo")?, attn.get("bo")?)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, x, &p.scope("ln2"))?;
    let f = ffn(tape, h, p)?;
    tape.add(x, f)
}
