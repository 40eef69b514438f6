//! Downstream metrics on compressed codes: cross-modal recall@k,
//! nearest-centroid classification, relation preservation, and a PCA
//! baseline at matched dimension.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::ergc::relation_score;
use crate::error::{ArfcError, Result};
use crate::featureio::FeatureDataset;
use crate::numkit::{Rng, Tensor};
use crate::tokenizer::{ratio_to_token_count, Ratio};
use crate::trainer::{compress, Checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Text-like queries against a visual-like gallery.
    T2i,
    /// Visual-like queries against a text-like gallery.
    I2t,
}

impl Direction {
    /// `(query modality, gallery modality)`.
    pub fn modalities(self) -> (u8, u8) {
        match self {
            Direction::T2i => (1, 0),
            Direction::I2t => (0, 1),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::T2i => "t2i",
            Direction::I2t => "i2t",
        })
    }
}

impl FromStr for Direction {
    type Err = ArfcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2i" => Ok(Direction::T2i),
            "i2t" => Ok(Direction::I2t),
            _ => Err(ArfcError::invalid(format!("unknown direction `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub queries: usize,
}

fn unit_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(ArfcError::invalid(format!("row {i} has zero norm")));
            }
            Ok(row.iter().map(|v| v / n).collect())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// 0-based rank of each query's best-placed matching gallery item when the
/// gallery is ordered by descending cosine similarity, ties by index.
pub fn match_ranks(
    queries: &Tensor,
    gallery: &Tensor,
    query_pairs: &[u32],
    gallery_pairs: &[u32],
) -> Result<Vec<usize>> {
    if queries.cols() != gallery.cols() {
        return Err(ArfcError::shape(format!(
            "code lengths differ: {} vs {}",
            queries.cols(),
            gallery.cols()
        )));
    }
    if query_pairs.len() != queries.rows() || gallery_pairs.len() != gallery.rows() {
        return Err(ArfcError::shape("pair ids do not match code counts"));
    }
    let q = unit_rows(queries)?;
    let g = unit_rows(gallery)?;
    let mut ranks = Vec::with_capacity(q.len());
    for (qi, qv) in q.iter().enumerate() {
        let sims: Vec<f64> = g.iter().map(|gv| dot(qv, gv)).collect();
        let mut best: Option<usize> = None;
        for (t, _) in gallery_pairs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == query_pairs[qi])
        {
            let rank = sims
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > sims[t] || (s == sims[t] && j < t))
                .count();
            best = Some(best.map_or(rank, |b| b.min(rank)));
        }
        ranks.push(
            best.ok_or_else(|| {
                ArfcError::invalid(format!("query {qi} has no pair in the gallery"))
            })?,
        );
    }
    Ok(ranks)
}

/// Percentage of queries whose pair ranks within the top `k`, for each `k`.
pub fn recall_at_k(
    queries: &Tensor,
    gallery: &Tensor,
    query_pairs: &[u32],
    gallery_pairs: &[u32],
    ks: &[usize],
) -> Result<Vec<f64>> {
    let ranks = match_ranks(queries, gallery, query_pairs, gallery_pairs)?;
    if ranks.is_empty() {
        return Err(ArfcError::invalid("no queries"));
    }
    Ok(ks
        .iter()
        .map(|&k| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect())
}

/// Recall@{1,5,10} of one direction over a dataset's two modalities.
pub fn retrieval_report(
    dataset: &FeatureDataset,
    codes: &Tensor,
    direction: Direction,
) -> Result<RetrievalReport> {
    let (qm, gm) = direction.modalities();
    let (qi, gi) = (dataset.modality_indices(qm), dataset.modality_indices(gm));
    let pick = |idx: &[usize]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * codes.cols());
        for &i in idx {
            data.extend_from_slice(codes.row(i));
        }
        Tensor::matrix(idx.len(), codes.cols(), data)
    };
    let pairs = |idx: &[usize]| {
        idx.iter()
            .map(|&i| dataset.records()[i].pair_id)
            .collect::<Vec<_>>()
    };
    let r = recall_at_k(
        &pick(&qi)?,
        &pick(&gi)?,
        &pairs(&qi),
        &pairs(&gi),
        &[1, 5, 10],
    )?;
    Ok(RetrievalReport {
        direction,
        r1: r[0],
        r5: r[1],
        r10: r[2],
        queries: qi.len(),
    })
}

/// Predicted label of each test code: the class whose mean training code
/// has the highest cosine similarity (ties to the smaller label).
pub fn nearest_centroid_predict(
    train: &Tensor,
    train_labels: &[u32],
    test: &Tensor,
    test_labels: &[u32],
) -> Result<Vec<u32>> {
    if train.cols() != test.cols()
        || train_labels.len() != train.rows()
        || test_labels.len() != test.rows()
    {
        return Err(ArfcError::shape("codes and labels are misaligned"));
    }
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &l) in train_labels.iter().enumerate() {
        let e = sums
            .entry(l)
            .or_insert_with(|| (vec![0.0; train.cols()], 0));
        e.0.iter_mut().zip(train.row(i)).for_each(|(s, v)| *s += v);
        e.1 += 1;
    }
    if let Some(l) = test_labels.iter().find(|l| !sums.contains_key(l)) {
        return Err(ArfcError::invalid(format!(
            "test label {l} never seen in training"
        )));
    }
    let labels: Vec<u32> = sums.keys().copied().collect();
    let centroids = Tensor::from_rows(
        &sums
            .values()
            .map(|(s, n)| s.iter().map(|v| v / *n as f64).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    )?;
    let c = unit_rows(&centroids)?;
    let t = unit_rows(test)?;
    Ok(t.iter()
        .map(|tv| {
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (k, cv) in c.iter().enumerate() {
                let s = dot(tv, cv);
                if s > best_sim {
                    best_sim = s;
                    best = k;
                }
            }
            labels[best]
        })
        .collect())
}

/// Percentage of test codes assigned their own label.
pub fn nearest_centroid_accuracy(
    train: &Tensor,
    train_labels: &[u32],
    test: &Tensor,
    test_labels: &[u32],
) -> Result<f64> {
    let pred = nearest_centroid_predict(train, train_labels, test, test_labels)?;
    if pred.is_empty() {
        return Err(ArfcError::invalid("no test codes"));
    }
    let hits = pred.iter().zip(test_labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Mean and leading principal directions of a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `[k, D]`, orthonormal rows.
    pub components: Tensor,
    /// Every covariance eigenvalue, descending.
    pub eigenvalues: Vec<f64>,
}

/// Fit the top-`k` components of the (1/N) covariance of `data` (`[N, D]`).
/// Each component is signed so its largest-magnitude entry is positive.
pub fn pca_fit(data: &Tensor, k: usize) -> Result<PcaBasis> {
    let (n, d) = (data.rows(), data.cols());
    if k > d {
        return Err(ArfcError::invalid(format!(
            "cannot keep {k} of {d} dimensions"
        )));
    }
    if n == 0 {
        return Err(ArfcError::invalid("empty training set"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(data.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| data.row(i)[j] - mean[j]);
    let cov = (centred.transpose() * &centred) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut comps = Vec::with_capacity(k * d);
    for &c in order.iter().take(k) {
        let col: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        comps.extend(col.iter().map(|v| v * sign));
    }
    Ok(PcaBasis {
        mean,
        components: Tensor::matrix(k, d, comps)?,
        eigenvalues: order.iter().map(|&c| eig.eigenvalues[c]).collect(),
    })
}

impl PcaBasis {
    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn compress(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.mean.len() {
            return Err(ArfcError::shape("feature length does not match the basis"));
        }
        let centred: Vec<f64> = f.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok((0..self.k())
            .map(|i| dot(self.components.row(i), &centred))
            .collect())
    }

    pub fn reconstruct(&self, code: &[f64]) -> Result<Vec<f64>> {
        if code.len() != self.k() {
            return Err(ArfcError::shape("code length does not match the basis"));
        }
        let mut out = self.mean.clone();
        for (i, &c) in code.iter().enumerate() {
            out.iter_mut()
                .zip(self.components.row(i))
                .for_each(|(o, v)| *o += c * v);
        }
        Ok(out)
    }

    /// Mean squared reconstruction error per vector over the rows of `data`.
    pub fn reconstruction_error(&self, data: &Tensor) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..data.rows() {
            let rec = self.reconstruct(&self.compress(data.row(i))?)?;
            total += squared_distance(data.row(i), &rec);
        }
        Ok(total / data.rows().max(1) as f64)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One row of the evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub ratio: f64,
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Mean squared reconstruction error per vector, via the checkpoint's
    /// main decoders.
    pub mse: f64,
    pub centroid_acc: f64,
    pub relation_err: f64,
    pub pca_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| ArfcError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Rows for one ratio (snapped value) and direction.
    pub fn row(&self, ratio: f64, direction: Direction) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.ratio == ratio && r.direction == direction)
    }
}

fn labels(ds: &FeatureDataset) -> Vec<u32> {
    ds.records().iter().map(|r| r.label).collect()
}

/// Metrics shared by both directions at one retained width.
fn ratio_rows(
    ratio: f64,
    eval: &FeatureDataset,
    fit: &FeatureDataset,
    eval_codes: &Tensor,
    fit_codes: &Tensor,
    mse: f64,
) -> Result<Vec<ReportRow>> {
    let originals = eval.all_features();
    let centroid_acc =
        nearest_centroid_accuracy(fit_codes, &labels(fit), eval_codes, &labels(eval))?;
    let relation_err = relation_score(&originals, eval_codes)?.agreement_error;
    let pca = pca_fit(&fit.all_features(), eval_codes.cols())?;
    let pca_mse = pca.reconstruction_error(&originals)?;
    [Direction::T2i, Direction::I2t]
        .into_iter()
        .map(|direction| {
            let r = retrieval_report(eval, eval_codes, direction)?;
            Ok(ReportRow {
                ratio,
                direction,
                r1: r.r1,
                r5: r.r5,
                r10: r.r10,
                mse,
                centroid_acc,
                relation_err,
                pca_mse,
            })
        })
        .collect()
}

/// Evaluate a checkpoint on the held-out split of `dataset` at each ratio.
/// Centroids and the PCA baseline are fitted on the training split.
pub fn evaluate_pipeline(
    ckpt: &Checkpoint,
    dataset: &FeatureDataset,
    ratios: &[Ratio],
    use_mos: bool,
) -> Result<EvalReport> {
    let cfg = ckpt.arc.config();
    if dataset.dim() != cfg.dim {
        return Err(ArfcError::config(format!(
            "dataset dimension {} vs checkpoint D={}",
            dataset.dim(),
            cfg.dim
        )));
    }
    let (fit, eval) = dataset.holdout_split();
    if fit.is_empty() || eval.is_empty() {
        return Err(ArfcError::invalid("dataset too small for a held-out split"));
    }
    let pool = if use_mos {
        &ckpt.mos_pool
    } else {
        &ckpt.arc_pool
    };
    let originals = eval.all_features();
    let mut report = EvalReport::default();
    for &r in ratios {
        let snapped = r.snap(cfg.tokens);
        let eval_codes = compress(ckpt, &originals, snapped, use_mos)?;
        let fit_codes = compress(ckpt, &fit.all_features(), snapped, use_mos)?;
        let cluster = pool.cluster(ratio_to_token_count(snapped, cfg.tokens))?;
        let mut mse = 0.0;
        for i in 0..eval_codes.rows() {
            let (rec, _) = cluster.reconstruct(eval_codes.row(i), &Rng::new(0), false)?;
            mse += squared_distance(originals.row(i), &rec);
        }
        mse /= eval_codes.rows() as f64;
        report.rows.extend(ratio_rows(
            snapped.value(),
            &eval,
            &fit,
            &eval_codes,
            &fit_codes,
            mse,
        )?);
    }
    Ok(report)
}

/// Metrics of the uncompressed held-out features (ratio 0, zero MSE).
pub fn evaluate_raw(dataset: &FeatureDataset) -> Result<EvalReport> {
    let (fit, eval) = dataset.holdout_split();
    if fit.is_empty() || eval.is_empty() {
        return Err(ArfcError::invalid("dataset too small for a held-out split"));
    }
    let rows = ratio_rows(
        0.0,
        &eval,
        &fit,
        &eval.all_features(),
        &fit.all_features(),
        0.0,
    )?;
    Ok(EvalReport { rows })
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rng: &mut Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn exact_pairs_give_full_recall() {
        let mut rng = Rng::new(1);
        let q = random(&mut rng, 10, 6);
        let ids: Vec<u32> = (0..10).collect();
        assert_eq!(recall_at_k(&q, &q, &ids, &ids, &[1]).unwrap(), vec![100.0]);
    }

    #[test]
    fn hand_built_ranking() {
        // query 0 matches gallery 2 which ranks second; query 1 matches gallery 1 which ranks first
        let q = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let g = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.2]]).unwrap();
        let r = recall_at_k(&q, &g, &[7, 8], &[5, 8, 7], &[1, 2, 3]).unwrap();
        assert_eq!(r, vec![50.0, 100.0, 100.0]);
        assert_eq!(
            match_ranks(&q, &g, &[7, 8], &[5, 8, 7]).unwrap(),
            vec![1, 0]
        );
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let q = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let g = Tensor::from_rows(&[[2.0, 0.0], [1.0, 0.0]]).unwrap();
        assert_eq!(match_ranks(&q, &g, &[1], &[0, 1]).unwrap(), vec![1]);
    }

    #[test]
    fn recall_errors() {
        let q = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let g = Tensor::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(recall_at_k(&q, &g, &[0], &[0], &[1]).is_err());
        assert!(recall_at_k(&q, &q, &[0], &[1], &[1]).is_err());
    }

    #[test]
    fn centroid_construction() {
        let train = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let test = Tensor::from_rows(&[[0.9, 0.1], [-0.9, 0.05]]).unwrap();
        assert_eq!(
            nearest_centroid_accuracy(&train, &[0, 1], &test, &[0, 1]).unwrap(),
            100.0
        );
        assert!(nearest_centroid_accuracy(&train, &[0, 1], &test, &[0, 2]).is_err());
    }

    #[test]
    fn pca_on_a_line() {
        let rows: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 2.0 * i as f64 + 1.0]).collect();
        let data = Tensor::from_rows(&rows).unwrap();
        let basis = pca_fit(&data, 1).unwrap();
        assert!(basis.reconstruction_error(&data).unwrap() < 1e-20);
        assert!(basis.components.row(0).iter().all(|v| *v > 0.0));
        assert!(pca_fit(&data, 3).is_err());
    }

    #[test]
    fn pca_error_is_discarded_spectrum() {
        let mut rng = Rng::new(3);
        let data = random(&mut rng, 60, 8);
        for k in 0..=8 {
            let basis = pca_fit(&data, k).unwrap();
            let gram = Tensor::new(
                vec![k, k],
                (0..k * k)
                    .map(|ij| dot(basis.components.row(ij / k), basis.components.row(ij % k)))
                    .collect(),
            )
            .unwrap();
            for i in 0..k {
                for j in 0..k {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram.row(i)[j] - want).abs() < 1e-8);
                }
            }
            let discarded: f64 = basis.eigenvalues[k..].iter().sum();
            assert!((basis.reconstruction_error(&data).unwrap() - discarded).abs() < 1e-6);
        }
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 9.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_mirrors_json_columns() {
        let report = EvalReport {
            rows: vec![ReportRow {
                ratio: 0.5,
                direction: Direction::I2t,
                r1: 1.0,
                r5: 2.0,
                r10: 3.0,
                mse: 0.1,
                centroid_acc: 90.0,
                relation_err: 0.01,
                pca_mse: 0.05,
            }],
        };
        let csv = report.to_csv().unwrap();
        assert_eq!(
            csv.lines().next().unwrap(),
            "ratio,direction,r1,r5,r10,mse,centroid_acc,relation_err,pca_mse"
        );
        assert!(csv.contains("i2t"));
        let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(json[0]["direction"], "i2t");
    }
}
