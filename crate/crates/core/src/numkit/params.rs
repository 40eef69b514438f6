use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{ArfcError, Result};

/// Named parameter set. Paths are dot-separated and iterate in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerParams {
    map: BTreeMap<String, Tensor>,
}

impl LayerParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        self.map.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.map
            .get(path)
            .ok_or_else(|| ArfcError::MissingParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(path)
            .ok_or_else(|| ArfcError::MissingParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> LayerParams {
        LayerParams {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Copy every entry under `prefix.`.
    pub fn with_prefix(&self, prefix: &str) -> LayerParams {
        LayerParams {
            map: self
                .map
                .iter()
                .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
                .collect(),
        }
    }

    /// Entries whose path starts with `prefix.`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> LayerParams {
        let p = format!("{prefix}.");
        LayerParams {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: LayerParams) {
        self.map.extend(other.map);
    }

    pub fn round_to_f32(&mut self) {
        for t in self.map.values_mut() {
            t.round_to_f32();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.map {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl FromIterator<(String, Tensor)> for LayerParams {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        LayerParams {
            map: iter.into_iter().collect(),
        }
    }
}

/// Xavier/Glorot uniform initialisation for a `fan_in x fan_out` weight.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-a, a))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

pub fn normal_init(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}
