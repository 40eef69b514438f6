use serde::{Deserialize, Serialize};

use super::params::LayerParams;
use crate::error::{ArfcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates for one parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: LayerParams,
    pub v: LayerParams,
    pub step: u64,
}

impl AdamState {
    pub fn for_params(params: &LayerParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay. Every parameter must have a
/// gradient of identical shape.
pub fn adamw_step(
    params: &mut LayerParams,
    grads: &LayerParams,
    state: &mut AdamState,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .map_err(|_| ArfcError::MissingGrad(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(ArfcError::shape(format!(
                "gradient for `{name}` has shape {:?}",
                g.shape()
            )));
        }
        if !state.m.contains(name) {
            state.m.insert(name.clone(), p.map(|_| 0.0));
            state.v.insert(name.clone(), p.map(|_| 0.0));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?.data();
        let m = state.m.get_mut(name)?.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.get_mut(name)?.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (state.m.get(name)?.data(), state.v.get(name)?.data());
        for ((w, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            *w -= cfg.lr * cfg.weight_decay * *w;
            *w -= cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescale all groups jointly so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [&mut LayerParams], max_norm: f64) -> f64 {
    let norm = groups
        .iter()
        .map(|g| g.iter().map(|(_, t)| t.sum_sq()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in groups.iter_mut() {
            for (_, t) in g.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}
