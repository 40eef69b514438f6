//! Helpers shared by the integration tests: finite differences, random
//! tensors and small fixed configurations.
#![allow(dead_code)]

use arfc_core::arc::{ArcConfig, Generation};
use arfc_core::numkit::{LayerParams, ParamVars, Rng, Tape, Tensor, Var};
use arfc_core::Result;

pub const FD_STEP: f64 = 1e-6;

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| scale * rng.normal()).collect(),
    )
    .unwrap()
}

/// Gradients smaller than this fraction of the whole set's norm are
/// indistinguishable from difference noise (the attention key bias, which
/// softmax ignores, has an exactly zero gradient).
pub const NOISE_FLOOR: f64 = 1e-6;

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_err_floor(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let (na, nb) = (norm(a), norm(b));
    diff / na.max(nb).max(floor)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    rel_err_floor(a, b, NOISE_FLOOR * norm(a).max(norm(b)))
}

/// Central differences of `f` with respect to every entry of `params`.
pub fn numeric_grads(
    params: &LayerParams,
    h: f64,
    mut f: impl FnMut(&LayerParams) -> f64,
) -> LayerParams {
    let mut out = params.zeros_like();
    let mut work = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        for i in 0..len {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = f(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = f(&work);
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            out.get_mut(&name).unwrap().data_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// Largest per-tensor relative error between two gradient sets with the same names.
pub fn max_rel_err(analytic: &LayerParams, numeric: &LayerParams) -> f64 {
    let total = numeric.iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt();
    let mut worst: f64 = 0.0;
    for (name, n) in numeric.iter() {
        let a = analytic
            .get(name)
            .unwrap_or_else(|_| panic!("missing analytic grad {name}"));
        let e = rel_err_floor(a.data(), n.data(), NOISE_FLOOR * total);
        if std::env::var("FD_DEBUG").is_ok() {
            eprintln!(
                "{name}: {e:.3e} |a|={:.3e} |n|={:.3e}",
                a.sum_sq().sqrt(),
                n.sum_sq().sqrt()
            );
        }
        worst = worst.max(e);
    }
    worst
}

/// Gradient check for a tape function of registered parameters and free
/// inputs. The output is contracted with fixed random weights to get a
/// scalar. Returns the worst relative error over all parameters and inputs.
pub fn grad_err(
    params: &LayerParams,
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &ParamVars, &[Var]) -> Result<Var>,
) -> f64 {
    let weights = {
        let mut tape = Tape::new();
        let pv = tape.register(params, true).unwrap();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone()).unwrap())
            .collect();
        let out = f(&mut tape, &pv, &vars).unwrap();
        random_tensor(tape.value(out).shape(), 1.0, &mut Rng::new(99))
    };
    let build = |params: &LayerParams, inputs: &[Tensor]| -> (Tape, ParamVars, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let pv = tape.register(params, true).unwrap();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone()).unwrap())
            .collect();
        let out = f(&mut tape, &pv, &vars).unwrap();
        let w = tape.constant(weights.clone()).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        (tape, pv, vars, loss)
    };
    let (tape, pv, vars, loss) = build(params, inputs);
    let grads = tape.backward(loss).unwrap();
    let value = |p: &LayerParams, x: &[Tensor]| {
        let (tape, _, _, loss) = build(p, x);
        tape.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    if !params.is_empty() {
        let numeric = numeric_grads(params, FD_STEP, |p| value(p, inputs));
        worst = worst.max(max_rel_err(&grads.collect(&pv), &numeric));
    }
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        let mut numeric = vec![0.0; input.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut moved = inputs.to_vec();
            moved[k].data_mut()[i] += FD_STEP;
            let up = value(params, &moved);
            moved[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = value(params, &moved);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Gradient check for a tape function of free inputs only.
pub fn tape_grad_err(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    grad_err(&LayerParams::new(), inputs, |tape, _, vars| f(tape, vars))
}

/// Two-layer toy compressor used by the gradient and loss checks.
pub fn toy_arc() -> ArcConfig {
    ArcConfig {
        dim: 16,
        tokens: 4,
        width: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        generation: Generation::Autoregressive,
    }
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let v: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.into_iter().map(|x| x / n));
    }
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Sum of squared differences between the two cosine-similarity matrices.
pub fn ergc_oracle(orig: &[Vec<f64>], codes: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for a in 0..orig.len() {
        for b in 0..orig.len() {
            let d = cosine(&orig[a], &orig[b]) - cosine(&codes[a], &codes[b]);
            total += d * d;
        }
    }
    total
}

/// `x W + b` with `W` stored `[in, out]`.
pub fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|o| {
            b.data()[o]
                + x.iter()
                    .enumerate()
                    .map(|(i, xi)| xi * w.data()[i * out + o])
                    .sum::<f64>()
        })
        .collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
