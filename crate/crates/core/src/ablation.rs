//! Toy-scale ablations: train one cell per (axis value, seed), evaluate on a
//! fixed ratio grid, and tabulate metrics. Only trends across seed means are
//! meaningful here.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arc::{arc_generate, Generation};
use crate::error::{ArfcError, Result};
use crate::evalkit::{evaluate_pipeline, nearest_centroid_predict, Direction};
use crate::featureio::{generate_synthetic, FeatureDataset, SynthConfig};
use crate::tokenizer::{ratio_to_token_count, Ratio};
use crate::trainer::{compress, train_arc, train_mos, Checkpoint, Discard, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Decoders,
    Tokens,
    Solutions,
    Lambda,
    Schedule,
    ArVsParallel,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Decoders => "decoders",
            Axis::Tokens => "tokens",
            Axis::Solutions => "solutions",
            Axis::Lambda => "lambda",
            Axis::Schedule => "schedule",
            Axis::ArVsParallel => "ar-vs-parallel",
        })
    }
}

impl FromStr for Axis {
    type Err = ArfcError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "decoders" => Axis::Decoders,
            "tokens" => Axis::Tokens,
            "solutions" => Axis::Solutions,
            "lambda" => Axis::Lambda,
            "schedule" => Axis::Schedule,
            "ar-vs-parallel" => Axis::ArVsParallel,
            _ => return Err(ArfcError::invalid(format!("unknown ablation axis `{s}`"))),
        })
    }
}

impl Axis {
    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let bad = || ArfcError::invalid(format!("bad value `{value}` for axis {self}"));
        let mut cfg = base.clone();
        match self {
            Axis::Decoders => cfg.aux_decoders = value.parse().map_err(|_| bad())?,
            Axis::Tokens => {
                cfg.arc.tokens = value.parse().map_err(|_| bad())?;
                cfg.ratios_per_step = cfg.ratios_per_step.min(cfg.arc.tokens);
            }
            Axis::Solutions => cfg.mos.solutions = value.parse().map_err(|_| bad())?,
            Axis::Lambda => cfg.lambda = value.parse().map_err(|_| bad())?,
            Axis::Schedule => cfg.schedule = value.parse()?,
            Axis::ArVsParallel => {
                cfg.arc.generation = match value {
                    "ar" | "autoregressive" => Generation::Autoregressive,
                    "parallel" => Generation::Parallel,
                    _ => return Err(bad()),
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub axis: Axis,
    pub values: Vec<String>,
    pub base: TrainConfig,
    pub data: SynthConfig,
    pub seeds: Vec<u64>,
    pub ratios: Vec<f64>,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() < 2 {
            return Err(ArfcError::config(
                "an ablation needs at least two axis values",
            ));
        }
        if self.seeds.len() < 3 {
            return Err(ArfcError::config("an ablation needs at least three seeds"));
        }
        if self.ratios.is_empty() {
            return Err(ArfcError::config("no evaluation ratios"));
        }
        for v in &self.values {
            self.axis.apply(&self.base, v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis_value: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub axis_value: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| ArfcError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Values of one metric for one axis value, in seed order.
    pub fn values(&self, axis_value: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.axis_value == axis_value && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// Mean and sample standard deviation over seeds, per cell and metric.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.axis_value.clone(), r.metric.clone()))
                .or_default()
                .push(r.value);
        }
        groups
            .into_iter()
            .map(|((axis_value, metric), v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let sd = if v.len() > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                CellSummary {
                    axis_value,
                    metric,
                    mean,
                    sd,
                }
            })
            .collect()
    }
}

/// Fraction of `inputs` rows whose shorter generations are bitwise prefixes
/// of the full generation.
pub fn prefix_consistency(ckpt: &Checkpoint, inputs: &FeatureDataset) -> Result<f64> {
    let tokens = ckpt.arc.config().tokens;
    let d = ckpt.arc.config().token_dim();
    let mut ok = 0;
    for r in inputs.records() {
        let full = arc_generate(&ckpt.arc, &r.values, tokens, false)?;
        if (1..tokens).all(|n| {
            arc_generate(&ckpt.arc, &r.values, n, false)
                .map(|p| p == full[..n * d])
                .unwrap_or(false)
        }) {
            ok += 1;
        }
    }
    Ok(ok as f64 / inputs.len().max(1) as f64)
}

/// Metrics of one trained cell.
pub fn cell_metrics(
    ckpt: &Checkpoint,
    dataset: &FeatureDataset,
    ratios: &[Ratio],
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let stages: &[(&str, bool)] = if ckpt.mos_step > 0 {
        &[("arc", false), ("mos", true)]
    } else {
        &[("arc", false)]
    };
    for &(name, use_mos) in stages {
        let report = evaluate_pipeline(ckpt, dataset, ratios, use_mos)?;
        for row in report.rows.iter().filter(|r| r.direction == Direction::T2i) {
            let r = row.ratio;
            out.push((format!("{name}.mse@{r}"), row.mse));
            out.push((format!("{name}.relation_err@{r}"), row.relation_err));
            out.push((format!("{name}.centroid_acc@{r}"), row.centroid_acc));
        }
        for row in &report.rows {
            out.push((format!("{name}.r1_{}@{}", row.direction, row.ratio), row.r1));
        }
    }
    let probe = dataset.holdout_split().1.filter_pairs(|p| p % 25 == 4);
    out.push((
        "prefix_consistency".into(),
        prefix_consistency(ckpt, &probe)?,
    ));
    Ok(out)
}

/// Train and evaluate every (value, seed) cell.
pub fn run_ablation(spec: &AblationSpec) -> Result<AblationTable> {
    spec.validate()?;
    let ratios = spec
        .ratios
        .iter()
        .map(|&r| Ratio::new(r))
        .collect::<Result<Vec<_>>>()?;
    let mut table = AblationTable::default();
    for value in &spec.values {
        for &seed in &spec.seeds {
            let cfg = TrainConfig {
                seed,
                ..spec.axis.apply(&spec.base, value)?
            };
            let dataset = generate_synthetic(&SynthConfig { seed, ..spec.data })?;
            let mut ckpt = train_arc(&cfg, &dataset, &mut Discard)?;
            if cfg.mos_steps > 0 {
                ckpt = train_mos(ckpt, &dataset, &mut Discard)?;
            }
            for (metric, v) in cell_metrics(&ckpt, &dataset, &ratios)? {
                table.rows.push(AblationRow {
                    axis_value: value.clone(),
                    seed,
                    metric,
                    value: v,
                });
            }
        }
    }
    Ok(table)
}

/// Ratios used by the dynamic-ratio experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicRatios {
    pub fixed: f64,
    /// Applied to the hardest 15% of classes.
    pub hard: f64,
    /// Applied to the classes in between.
    pub normal: f64,
    /// Applied to the easiest 30% of classes.
    pub easy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicRow {
    pub policy: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicReport {
    /// `(label, accuracy at the fixed ratio)`, hardest first.
    pub class_ranking: Vec<(u32, f64)>,
    pub hard: Vec<u32>,
    pub easy: Vec<u32>,
    pub rows: Vec<DynamicRow>,
}

/// Per-class accuracy of predictions, sorted ascending (ties by label).
pub fn rank_classes(labels: &[u32], predictions: &[u32]) -> Vec<(u32, f64)> {
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (l, p) in labels.iter().zip(predictions) {
        let e = counts.entry(*l).or_default();
        e.1 += 1;
        if l == p {
            e.0 += 1;
        }
    }
    let mut ranking: Vec<(u32, f64)> = counts
        .into_iter()
        .map(|(l, (h, n))| (l, 100.0 * h as f64 / n as f64))
        .collect();
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranking
}

/// Nearest-centroid accuracy at a fixed ratio, then again with hard classes
/// compressed less and easy classes compressed more. Groups follow the true
/// class of each held-out sample.
pub fn dynamic_ratio_experiment(
    ckpt: &Checkpoint,
    dataset: &FeatureDataset,
    ratios: DynamicRatios,
    use_mos: bool,
) -> Result<DynamicReport> {
    let cfg = ckpt.arc.config();
    let (fit, eval) = dataset.holdout_split();
    let zero = Ratio::new(0.0)?;
    let fit_full = compress(ckpt, &fit.all_features(), zero, use_mos)?;
    let eval_full = compress(ckpt, &eval.all_features(), zero, use_mos)?;
    let fit_labels: Vec<u32> = fit.records().iter().map(|r| r.label).collect();
    let eval_labels: Vec<u32> = eval.records().iter().map(|r| r.label).collect();
    let width = |r: f64| -> Result<usize> {
        Ok(ratio_to_token_count(Ratio::new(r)?, cfg.tokens) * cfg.token_dim())
    };
    let prefix = |t: &crate::numkit::Tensor, w: usize| -> Result<crate::numkit::Tensor> {
        let data = (0..t.rows()).flat_map(|i| t.row(i)[..w].to_vec()).collect();
        crate::numkit::Tensor::matrix(t.rows(), w, data)
    };
    // predictions for every held-out sample at a given width
    let predict_at = |w: usize| -> Result<Vec<u32>> {
        nearest_centroid_predict(
            &prefix(&fit_full, w)?,
            &fit_labels,
            &prefix(&eval_full, w)?,
            &eval_labels,
        )
    };
    let fixed_pred = predict_at(width(ratios.fixed)?)?;
    let accuracy = |pred: &[u32]| {
        100.0
            * pred
                .iter()
                .zip(&eval_labels)
                .filter(|(p, l)| p == l)
                .count() as f64
            / pred.len().max(1) as f64
    };
    let ranking = rank_classes(&eval_labels, &fixed_pred);
    let classes = ranking.len();
    let n_hard = (classes as f64 * 0.15).floor() as usize;
    let n_easy = ((classes as f64 * 0.30).floor() as usize).min(classes - n_hard);
    let hard: Vec<u32> = ranking[..n_hard].iter().map(|c| c.0).collect();
    let easy: Vec<u32> = ranking[classes - n_easy..].iter().map(|c| c.0).collect();
    let mut by_width: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for r in [ratios.hard, ratios.normal, ratios.easy] {
        let w = width(r)?;
        if let std::collections::btree_map::Entry::Vacant(e) = by_width.entry(w) {
            e.insert(predict_at(w)?);
        }
    }
    let dynamic_pred: Vec<u32> = eval_labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let r = if hard.contains(l) {
                ratios.hard
            } else if easy.contains(l) {
                ratios.easy
            } else {
                ratios.normal
            };
            by_width[&width(r).expect("validated above")][i]
        })
        .collect();
    Ok(DynamicReport {
        rows: vec![
            DynamicRow {
                policy: "fixed".into(),
                accuracy: accuracy(&fixed_pred),
            },
            DynamicRow {
                policy: "dynamic".into(),
                accuracy: accuracy(&dynamic_pred),
            },
        ],
        class_ranking: ranking,
        hard,
        easy,
    })
}
