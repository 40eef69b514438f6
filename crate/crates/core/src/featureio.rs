//! Feature datasets: synthetic paired embeddings, the `ARFD` file format and
//! seeded batching.
//!
//! File layout (little-endian): magic `ARFD`, u32 version, u64 record count,
//! u32 dimension, u8 dtype (0 = f32), then per record u8 modality, u32 label,
//! u32 pair id and the feature values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ArfcError, Result};
use crate::numkit::{Rng, Tensor};

pub const DATASET_MAGIC: [u8; 4] = *b"ARFD";
pub const DATASET_VERSION: u32 = 1;

/// 0 for visual-like, 1 for text-like records.
pub type Modality = u8;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub modality: Modality,
    pub label: u32,
    pub pair_id: u32,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    dim: usize,
    records: Vec<Record>,
}

impl FeatureDataset {
    pub fn new(dim: usize, records: Vec<Record>) -> Result<Self> {
        if let Some(r) = records.iter().find(|r| r.values.len() != dim) {
            return Err(ArfcError::shape(format!(
                "record of length {} in a {dim}-d dataset",
                r.values.len()
            )));
        }
        Ok(FeatureDataset { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Number of distinct labels.
    pub fn class_count(&self) -> usize {
        let mut labels: Vec<u32> = self.records.iter().map(|r| r.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels.len()
    }

    /// Features of the given record indices as a `[n, D]` matrix.
    pub fn features(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            let r = self
                .records
                .get(i)
                .ok_or_else(|| ArfcError::invalid(format!("record {i} out of range")))?;
            data.extend_from_slice(&r.values);
        }
        Tensor::new(vec![indices.len(), self.dim], data)
    }

    pub fn all_features(&self) -> Tensor {
        let data = self
            .records
            .iter()
            .flat_map(|r| r.values.iter().copied())
            .collect();
        Tensor::new(vec![self.records.len(), self.dim], data)
            .expect("records share the dataset width")
    }

    /// Indices of records of one modality, in file order.
    pub fn modality_indices(&self, modality: Modality) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].modality == modality)
            .collect()
    }

    /// Same records with replaced feature values (e.g. compressed codes).
    pub fn with_features(&self, features: &Tensor) -> Result<FeatureDataset> {
        if features.rows() != self.records.len() || features.shape().len() != 2 {
            return Err(ArfcError::shape(
                "feature matrix does not match record count",
            ));
        }
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| Record {
                values: features.row(i).to_vec(),
                ..r.clone()
            })
            .collect();
        Ok(FeatureDataset {
            dim: features.cols(),
            records,
        })
    }

    /// Records whose pair id satisfies `keep`.
    pub fn filter_pairs(&self, keep: impl Fn(u32) -> bool) -> FeatureDataset {
        FeatureDataset {
            dim: self.dim,
            records: self
                .records
                .iter()
                .filter(|r| keep(r.pair_id))
                .cloned()
                .collect(),
        }
    }

    /// Train / held-out split: every fifth pair id is held out.
    pub fn holdout_split(&self) -> (FeatureDataset, FeatureDataset) {
        (
            self.filter_pairs(|p| p % 5 != 4),
            self.filter_pairs(|p| p % 5 == 4),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.records.len() * (9 + 4 * self.dim));
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(0);
        for r in &self.records {
            out.push(r.modality);
            out.extend_from_slice(&r.label.to_le_bytes());
            out.extend_from_slice(&r.pair_id.to_le_bytes());
            for &v in &r.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let magic: [u8; 4] = take(&mut cur, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(ArfcError::BadMagic {
                expected: DATASET_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(take(&mut cur, "version")?);
        if version != DATASET_VERSION {
            return Err(ArfcError::Version {
                expected: DATASET_VERSION,
                found: version,
            });
        }
        let n = u64::from_le_bytes(take(&mut cur, "record count")?) as usize;
        let dim = u32::from_le_bytes(take(&mut cur, "dimension")?) as usize;
        let [dtype] = take::<1>(&mut cur, "dtype")?;
        if dtype != 0 {
            return Err(ArfcError::Truncated(format!(
                "unsupported dtype tag {dtype}"
            )));
        }
        let record_len = 9 + 4 * dim;
        if cur.len()
            != n.checked_mul(record_len)
                .ok_or_else(|| ArfcError::Truncated("record count".into()))?
        {
            return Err(ArfcError::Truncated(format!(
                "expected {n} records of {record_len} bytes, found {} bytes",
                cur.len()
            )));
        }
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let [modality] = take::<1>(&mut cur, "modality")?;
            let label = u32::from_le_bytes(take(&mut cur, "label")?);
            let pair_id = u32::from_le_bytes(take(&mut cur, "pair id")?);
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f32::from_le_bytes(take(&mut cur, "value")?) as f64);
            }
            records.push(Record {
                modality,
                label,
                pair_id,
                values,
            });
        }
        Ok(FeatureDataset { dim, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        FeatureDataset::from_bytes(&bytes)
    }
}

pub(crate) fn take<const N: usize>(cur: &mut &[u8], what: &str) -> Result<[u8; N]> {
    if cur.len() < N {
        return Err(ArfcError::Truncated(format!(
            "unexpected end of file reading {what}"
        )));
    }
    let (head, rest) = cur.split_at(N);
    *cur = rest;
    Ok(head.try_into().expect("split at N"))
}

/// Parameters of the synthetic paired-embedding generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub pairs_per_class: usize,
    pub dim: usize,
    pub latent_dim: usize,
    /// Norm of the isotropic noise added to each normalised view.
    pub noise: f64,
    /// Spread of pair latents around their class centre.
    pub spread: f64,
    /// Size of the modality-specific part of each view's linear map; zero
    /// gives identical maps.
    pub modality_gap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 16,
            pairs_per_class: 32,
            dim: 64,
            latent_dim: 24,
            noise: 0.1,
            spread: 0.6,
            modality_gap: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim > self.dim {
            return Err(ArfcError::config(format!(
                "latent dim {} must lie in [1, {}]",
                self.latent_dim, self.dim
            )));
        }
        if !(self.noise >= 0.0 && self.spread >= 0.0 && self.modality_gap >= 0.0) {
            return Err(ArfcError::config(
                "noise, spread and modality gap must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Two modality views per pair: each is a fixed random linear map of a
/// shared latent point near its class centre, normalised, perturbed by
/// isotropic noise and normalised again. Values are stored at f32 precision
/// so a saved dataset reloads unchanged.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<FeatureDataset> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let (k, d) = (cfg.latent_dim, cfg.dim);
    let gaussian = |rng: &mut Rng, n: usize, scale: f64| -> Vec<f64> {
        (0..n).map(|_| rng.normal() * scale).collect()
    };
    let map_scale = 1.0 / (k as f64).sqrt();
    let shared = gaussian(&mut root.derive(1), k * d, map_scale);
    let maps: Vec<Vec<f64>> = (0..2u64)
        .map(|m| {
            let own = gaussian(&mut root.derive_path(&[2, m]), k * d, map_scale);
            shared
                .iter()
                .zip(&own)
                .map(|(s, o)| s + cfg.modality_gap * o)
                .collect()
        })
        .collect();
    let mut centre_rng = root.derive(3);
    let centres: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| gaussian(&mut centre_rng, k, 1.0))
        .collect();
    let mut point_rng = root.derive(4);
    let mut noise_rng = root.derive(5);
    let noise_scale = cfg.noise / (d as f64).sqrt();
    let mut records = Vec::with_capacity(cfg.classes * cfg.pairs_per_class * 2);
    for (c, centre) in centres.iter().enumerate() {
        for p in 0..cfg.pairs_per_class {
            let z: Vec<f64> = centre
                .iter()
                .map(|m| m + cfg.spread * point_rng.normal())
                .collect();
            let pair_id = (c * cfg.pairs_per_class + p) as u32;
            for (m, map) in maps.iter().enumerate() {
                let mut v = vec![0.0; d];
                for (i, zi) in z.iter().enumerate() {
                    for (o, a) in v.iter_mut().zip(&map[i * d..(i + 1) * d]) {
                        *o += zi * a;
                    }
                }
                normalize(&mut v)?;
                for x in v.iter_mut() {
                    *x += noise_scale * noise_rng.normal();
                }
                normalize(&mut v)?;
                let values = v.into_iter().map(|x| x as f32 as f64).collect();
                records.push(Record {
                    modality: m as u8,
                    label: c as u32,
                    pair_id,
                    values,
                });
            }
        }
    }
    FeatureDataset::new(d, records)
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(ArfcError::NonFinite { op: "normalize" });
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// Seeded, epoch-based batch order over a dataset.
///
/// Each epoch reshuffles with `rng.derive(epoch)`; a trailing partial batch is
/// dropped. In paired mode both members of a pair land in the same batch,
/// adjacent to each other.
#[derive(Clone, Debug)]
pub struct BatchStream {
    units: Vec<Vec<usize>>,
    per_batch: usize,
    rng: Rng,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    pub fn new(dataset: &FeatureDataset, batch: usize, seed: u64, paired: bool) -> Result<Self> {
        if batch == 0 || batch > dataset.len() {
            return Err(ArfcError::invalid(format!(
                "batch size {batch} outside [1, {}]",
                dataset.len()
            )));
        }
        let (units, per_batch) = if paired {
            if !batch.is_multiple_of(2) {
                return Err(ArfcError::invalid("paired batches need an even batch size"));
            }
            let mut by_pair: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (i, r) in dataset.records().iter().enumerate() {
                by_pair.entry(r.pair_id).or_default().push(i);
            }
            if let Some((id, members)) = by_pair.iter().find(|(_, m)| m.len() != 2) {
                return Err(ArfcError::invalid(format!(
                    "pair {id} has {} members",
                    members.len()
                )));
            }
            (by_pair.into_values().collect(), batch / 2)
        } else {
            ((0..dataset.len()).map(|i| vec![i]).collect(), batch)
        };
        let mut stream = BatchStream {
            units,
            per_batch,
            rng: Rng::new(seed),
            epoch: 0,
            order: vec![],
            cursor: 0,
        };
        stream.reshuffle();
        Ok(stream)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.units.len()).collect();
        self.rng.derive(self.epoch).shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Batches per epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.units.len() / self.per_batch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.per_batch > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let picked = &self.order[self.cursor..self.cursor + self.per_batch];
        self.cursor += self.per_batch;
        picked
            .iter()
            .flat_map(|&u| self.units[u].iter().copied())
            .collect()
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// All batches of one epoch.
pub fn epoch_batches(
    dataset: &FeatureDataset,
    batch: usize,
    seed: u64,
    paired: bool,
) -> Result<Vec<Vec<usize>>> {
    let mut stream = BatchStream::new(dataset, batch, seed, paired)?;
    Ok((0..stream.batches_per_epoch())
        .map(|_| stream.next_batch())
        .collect())
}
