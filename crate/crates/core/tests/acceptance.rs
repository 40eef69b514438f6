//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use arfc_core::arc::{arc_forward_loss, arc_generate, ArcConfig, ArcModel};
use arfc_core::decoderpool::DecoderPool;
use arfc_core::ergc::{build_graph, ergc_loss_on_tape};
use arfc_core::evalkit::{
    evaluate_pipeline, evaluate_raw, nearest_centroid_accuracy, recall_at_k, spearman, Direction,
    EvalReport,
};
use arfc_core::featureio::{generate_synthetic, FeatureDataset, SynthConfig};
use arfc_core::numkit::{block_params, layer_norm, mhsa, AdamWConfig, LayerParams, Rng, Tensor};
use arfc_core::schedule::{sample_beta, ScheduleMode};
use arfc_core::tokenizer::{ratio_to_token_count, truncate, Ratio};
use arfc_core::trainer::{
    compress, train_arc, train_both, train_mos, Checkpoint, Stage, TrainConfig, TrainLogRecord,
};
use arfc_core::ArfcError;
use common::*;

const SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_RATIOS: [f64; 4] = [0.0, 0.25, 0.5, 0.75];
/// Trailing window of the smoothed training loss.
const SMOOTH: u64 = 50;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ratios(rs: &[f64]) -> Vec<Ratio> {
    rs.iter().map(|&r| Ratio::new(r).unwrap()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Training setup shared by every trained fixture.
fn fixture_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ratios_per_step: 4,
        optimizer: AdamWConfig {
            lr: 1e-2,
            ..AdamWConfig::default()
        },
        cosine_decay: true,
        log_wall_time: false,
        ..TrainConfig::default()
    }
}

struct Run {
    arc: Checkpoint,
    full: Option<Checkpoint>,
    log: Vec<TrainLogRecord>,
}

fn run(cfg: &TrainConfig, data: &FeatureDataset) -> Run {
    let mut log = Vec::new();
    let arc = train_arc(cfg, data, &mut log).unwrap();
    let full = (cfg.mos_steps > 0).then(|| train_mos(arc.clone(), data, &mut log).unwrap());
    Run { arc, full, log }
}

struct SeedRuns {
    data: FeatureDataset,
    /// Progressive schedule, relation weight 0.5.
    ergc: Run,
    /// Progressive schedule, relation weight 0.
    plain: Run,
    /// Uniform schedule, stage 1 only.
    uniform: Run,
}

fn seed_runs(i: usize) -> &'static SeedRuns {
    static RUNS: [OnceLock<SeedRuns>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    RUNS[i].get_or_init(|| {
        let seed = SEEDS[i];
        let began = Instant::now();
        let data = generate_synthetic(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let base = fixture_config(seed);
        let ergc = run(&base, &data);
        let plain = run(
            &TrainConfig {
                lambda: 0.0,
                ..base.clone()
            },
            &data,
        );
        let uniform = run(
            &TrainConfig {
                schedule: ScheduleMode::Uniform,
                mos_steps: 0,
                ..base
            },
            &data,
        );
        eprintln!(
            "  trained seed {seed} fixtures in {:.0}s",
            began.elapsed().as_secs_f64()
        );
        SeedRuns {
            data,
            ergc,
            plain,
            uniform,
        }
    })
}

fn all_runs() -> Vec<&'static SeedRuns> {
    (0..SEEDS.len()).map(seed_runs).collect()
}

fn eval(ckpt: &Checkpoint, data: &FeatureDataset, use_mos: bool) -> EvalReport {
    evaluate_pipeline(ckpt, data, &ratios(&EVAL_RATIOS), use_mos).unwrap()
}

/// Mean R@1 of both directions at one ratio.
fn r1(report: &EvalReport, r: f64) -> f64 {
    (report.row(r, Direction::T2i).unwrap().r1 + report.row(r, Direction::I2t).unwrap().r1) / 2.0
}

fn field(report: &EvalReport, r: f64, f: impl Fn(&arfc_core::evalkit::ReportRow) -> f64) -> f64 {
    f(report.row(r, Direction::T2i).unwrap())
}

fn smoothed(log: &[TrainLogRecord], end: u64) -> f64 {
    let v: Vec<f64> = log
        .iter()
        .filter(|r| r.stage == Stage::Arc && r.step < end && r.step + SMOOTH >= end)
        .map(|r| r.total)
        .collect();
    mean(&v)
}

fn gradient_suite() -> Outcome {
    let mut errs: Vec<(&str, f64, f64)> = Vec::new();
    let mut rng = Rng::new(1);
    let a = random_tensor(&[3, 4], 1.0, &mut rng);
    let b = random_tensor(&[4, 5], 1.0, &mut rng);
    errs.push((
        "matmul",
        tape_grad_err(&[a, b], |t, v| t.matmul(v[0], v[1])),
        1e-4,
    ));
    let x = random_tensor(&[4, 6], 2.0, &mut rng);
    errs.push(("softmax", tape_grad_err(&[x], |t, v| t.softmax(v[0])), 1e-4));
    let x = random_tensor(&[3, 8], 1.5, &mut rng);
    let mut p = LayerParams::new();
    p.insert("g", random_tensor(&[8], 1.0, &mut rng));
    p.insert("b", random_tensor(&[8], 1.0, &mut rng));
    errs.push((
        "layer_norm",
        grad_err(&p, &[x], |t, pv, v| layer_norm(t, v[0], pv)),
        1e-4,
    ));
    let x = random_tensor(&[5, 7], 2.0, &mut rng);
    errs.push(("gelu", tape_grad_err(&[x], |t, v| t.gelu(v[0])), 1e-4));
    let p = block_params(8, 2, &mut rng).strip_prefix("attn");
    let x = random_tensor(&[6, 8], 1.0, &mut rng);
    errs.push((
        "mhsa",
        grad_err(&p, &[x], |t, pv, v| {
            mhsa(t, v[0], pv, 2, 3, 2, true, &mut Rng::new(0), 0.0, false)
        }),
        1e-4,
    ));
    let orig = build_graph(&random_tensor(&[5, 12], 1.0, &mut rng)).unwrap();
    let codes = random_tensor(&[5, 6], 1.0, &mut rng);
    errs.push((
        "ergc_loss",
        tape_grad_err(&[codes], |t, v| ergc_loss_on_tape(t, v[0], &orig)),
        1e-4,
    ));

    let cfg = toy_arc();
    let model = ArcModel::init(cfg, &mut rng.derive(0)).unwrap();
    let pool = DecoderPool::init(cfg.dim, cfg.tokens, 2, &mut rng.derive(1)).unwrap();
    let batch = unit_rows(3, cfg.dim, &mut rng);
    let rs = ratios(&[0.0, 0.5]);
    let step = Rng::new(11);
    let out = arc_forward_loss(&model, &batch, &rs, &pool, 0.5, &step).unwrap();
    let numeric = numeric_grads(model.params(), FD_STEP, |p| {
        let m = ArcModel::from_params(cfg, p.clone()).unwrap();
        arc_forward_loss(&m, &batch, &rs, &pool, 0.5, &step)
            .unwrap()
            .parts
            .total
    });
    errs.push((
        "arc_forward_loss",
        max_rel_err(&out.model_grads, &numeric),
        1e-3,
    ));

    let detail = errs
        .iter()
        .map(|(n, e, _)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(errs.iter().all(|(_, e, tol)| e < tol), detail)
}

fn prefix_consistency() -> Outcome {
    let cfg = ArcConfig::default();
    let untrained = ArcModel::init(cfg, &mut Rng::new(5)).unwrap();
    let quick = TrainConfig {
        arc_steps: 60,
        mos_steps: 0,
        log_wall_time: false,
        ..fixture_config(5)
    };
    let data = generate_synthetic(&SynthConfig {
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let trained = train_arc(&quick, &data, &mut arfc_core::trainer::Discard)
        .unwrap()
        .arc;
    let t = cfg.tokens;
    let began = Instant::now();
    let mut rng = Rng::new(6);
    let mut failures = 0;
    for model in [&untrained, &trained] {
        for _ in 0..100 {
            let f = unit_rows(1, cfg.dim, &mut rng);
            let f = f.row(0);
            let n2 = 2 + rng.below(t - 1);
            let n1 = 1 + rng.below(n2 - 1);
            let long = arc_generate(model, f, n2, false).unwrap();
            let short = arc_generate(model, f, n1, false).unwrap();
            if short
                .iter()
                .zip(&long)
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                failures += 1;
            }
            let full = arc_generate(model, f, t, false).unwrap();
            let r = Ratio::new(rng.uniform() * (1.0 - 1.0 / t as f64)).unwrap();
            let direct = arc_generate(model, f, ratio_to_token_count(r, t), false).unwrap();
            let cut = truncate(&full, t, r).unwrap();
            if cut.len() != direct.len()
                || cut
                    .iter()
                    .zip(&direct)
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                failures += 1;
            }
        }
    }
    let secs = began.elapsed().as_secs_f64();
    check(
        failures == 0 && secs < 30.0,
        format!("{failures} mismatches over 400 checks, {secs:.1}s"),
    )
}

fn any_ratio_trend() -> Outcome {
    let reports: Vec<EvalReport> = all_runs()
        .iter()
        .map(|s| eval(s.ergc.full.as_ref().unwrap(), &s.data, true))
        .collect();
    let mse: Vec<f64> = EVAL_RATIOS
        .iter()
        .map(|&r| {
            mean(
                &reports
                    .iter()
                    .map(|p| field(p, r, |x| x.mse))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let rec: Vec<f64> = EVAL_RATIOS
        .iter()
        .map(|&r| mean(&reports.iter().map(|p| r1(p, r)).collect::<Vec<_>>()))
        .collect();
    let rho = spearman(&EVAL_RATIOS, &mse);
    // queries pooled over both directions and all seeds; noise is one
    // query's worth of recall or two binomial standard errors
    let n = (all_runs()[0].data.holdout_split().1.len() * SEEDS.len()) as f64;
    let noise = |p: f64| (2.0 * (p / 100.0 * (1.0 - p / 100.0) / n).sqrt() * 100.0).max(100.0 / n);
    let recall_ok = rec.windows(2).all(|w| w[1] <= w[0] + noise(w[0]));
    let detail = format!(
        "MSE {:?} (spearman {rho:.2}), R@1 {:?}",
        mse.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
        rec.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>()
    );
    check(rho > 0.9 && recall_ok, detail)
}

fn pca_comparison() -> Outcome {
    let (mut arc, mut pca, mut mos_r1, mut raw_r1) = (vec![], vec![], vec![], vec![]);
    for s in all_runs() {
        let arc_report = eval(&s.ergc.arc, &s.data, false);
        arc.push(field(&arc_report, 0.5, |x| x.mse));
        pca.push(field(&arc_report, 0.5, |x| x.pca_mse));
        mos_r1.push(r1(&eval(s.ergc.full.as_ref().unwrap(), &s.data, true), 0.5));
        raw_r1.push(r1(&evaluate_raw(&s.data).unwrap(), 0.0));
    }
    let (arc, pca, mos_r1, raw_r1) = (mean(&arc), mean(&pca), mean(&mos_r1), mean(&raw_r1));
    check(
        arc <= 2.0 * pca && raw_r1 - mos_r1 <= 10.0,
        format!(
            "ARC MSE {arc:.4} vs PCA {pca:.4} (ratio {:.2}), R@1 {mos_r1:.1} vs raw {raw_r1:.1}",
            arc / pca
        ),
    )
}

fn ergc_efficacy() -> Outcome {
    let mut parts = vec![];
    let mut ok = true;
    for r in [0.5, 0.75] {
        let with: Vec<f64> = all_runs()
            .iter()
            .map(|s| {
                field(
                    &eval(s.ergc.full.as_ref().unwrap(), &s.data, true),
                    r,
                    |x| x.relation_err,
                )
            })
            .collect();
        let without: Vec<f64> = all_runs()
            .iter()
            .map(|s| {
                field(
                    &eval(s.plain.full.as_ref().unwrap(), &s.data, true),
                    r,
                    |x| x.relation_err,
                )
            })
            .collect();
        ok &= mean(&with) < mean(&without);
        parts.push(format!(
            "r={r}: {:.4} vs {:.4}",
            mean(&with),
            mean(&without)
        ));
    }
    check(ok, parts.join(", "))
}

fn component_ordering() -> Outcome {
    let mut arc = vec![];
    let mut mos = vec![];
    let mut full = vec![];
    for s in all_runs() {
        arc.push(field(&eval(&s.plain.arc, &s.data, false), 0.0, |x| x.mse));
        mos.push(field(
            &eval(s.plain.full.as_ref().unwrap(), &s.data, true),
            0.0,
            |x| x.mse,
        ));
        full.push(field(
            &eval(s.ergc.full.as_ref().unwrap(), &s.data, true),
            0.0,
            |x| x.mse,
        ));
    }
    let wins = |lo: &[f64], hi: &[f64]| lo.iter().zip(hi).filter(|(a, b)| a <= b).count();
    let (a, b) = (wins(&full, &mos), wins(&mos, &arc));
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.4}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    check(
        a >= 2 && b >= 2,
        format!(
            "r=0 MSE ARC {} | +MoS {} | +MoS+ERGC {}; +MoS <= ARC on {b}/3 seeds, +ERGC <= +MoS on {a}/3",
            fmt(&arc),
            fmt(&mos),
            fmt(&full)
        ),
    )
}

fn schedule_comparison() -> Outcome {
    let steps = fixture_config(0).arc_steps;
    let mut early_wins = 0;
    let mut close = true;
    let mut parts = vec![];
    for s in all_runs() {
        let (p25, u25) = (
            smoothed(&s.ergc.log, steps / 4),
            smoothed(&s.uniform.log, steps / 4),
        );
        let (pf, uf) = (
            smoothed(&s.ergc.log, steps),
            smoothed(&s.uniform.log, steps),
        );
        early_wins += usize::from(p25 < u25);
        close &= (pf - uf).abs() <= 0.1 * pf.max(uf);
        parts.push(format!(
            "25% {p25:.1} vs {u25:.1}, final {pf:.1} vs {uf:.1}"
        ));
    }
    check(
        early_wins >= 2 && close,
        format!("progressive vs uniform: {}", parts.join("; ")),
    )
}

/// Simpson's rule on `[a, b]` with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n)
        .map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    (f(a) + f(b) + inner) * h / 3.0
}

fn beta_statistics() -> Outcome {
    const N: usize = 100_000;
    let mut parts = vec![];
    let mut ok = true;
    for (i, (a, b)) in [(1.0, 1.0), (80.0, 5.0), (5.0, 5.0)]
        .into_iter()
        .enumerate()
    {
        let mut rng = Rng::new(100 + i as u64);
        let xs: Vec<f64> = (0..N).map(|_| sample_beta(a, b, &mut rng)).collect();
        let m = mean(&xs);
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (N - 1) as f64;
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / N as f64;
        let want_m = a / (a + b);
        let want_v = a * b / ((a + b).powi(2) * (a + b + 1.0));
        let se_m = (var / N as f64).sqrt();
        let se_v = ((m4 - var * var) / N as f64).sqrt();
        let zm = (m - want_m) / se_m;
        let zv = (var - want_v) / se_v;
        ok &= zm.abs() < 3.0 && zv.abs() < 3.0;
        parts.push(format!("({a},{b}) z_mean {zm:+.2} z_var {zv:+.2}"));
    }
    let kernel = |x: f64| x.powi(79) * (1.0 - x).powi(4);
    let tail = simpson(kernel, 0.75, 1.0, 20_000) / simpson(kernel, 0.0, 1.0, 80_000);
    ok &= tail > 0.99;
    parts.push(format!("P(r>0.75 | 80,5) = 1 - {:.2e}", 1.0 - tail));
    check(ok, parts.join(", "))
}

fn determinism_and_formats() -> Outcome {
    let data = generate_synthetic(&SynthConfig {
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        arc_steps: 30,
        mos_steps: 20,
        ..fixture_config(9)
    };
    let once = || {
        let mut log = Vec::new();
        let ckpt = train_both(&cfg, &data, &mut log).unwrap();
        let lines: Vec<String> = log
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect();
        let codes = compress(&ckpt, &data.all_features(), Ratio::new(0.5).unwrap(), true).unwrap();
        (ckpt.to_bytes().unwrap(), lines, codes)
    };
    let (c1, l1, x1) = once();
    let (c2, l2, x2) = once();
    let mut issues = vec![];
    if c1 != c2 {
        issues.push("checkpoints differ");
    }
    if l1 != l2 {
        issues.push("logs differ");
    }
    if x1
        .data()
        .iter()
        .zip(x2.data())
        .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        issues.push("compressed outputs differ");
    }
    let ds_bytes = data.to_bytes();
    if FeatureDataset::from_bytes(&ds_bytes).unwrap().to_bytes() != ds_bytes {
        issues.push("dataset round trip");
    }
    if Checkpoint::from_bytes(&c1).unwrap().to_bytes().unwrap() != c1 {
        issues.push("checkpoint round trip");
    }
    for (is_dataset, bytes) in [(true, ds_bytes), (false, c1)] {
        let mut magic = bytes.clone();
        magic[0] ^= 0xff;
        let mut version = bytes.clone();
        version[4] = version[4].wrapping_add(1);
        let (m, v) = if is_dataset {
            (
                FeatureDataset::from_bytes(&magic).err(),
                FeatureDataset::from_bytes(&version).err(),
            )
        } else {
            (
                Checkpoint::from_bytes(&magic).err(),
                Checkpoint::from_bytes(&version).err(),
            )
        };
        if !matches!(m, Some(ArfcError::BadMagic { .. })) {
            issues.push("corrupted magic not rejected as bad magic");
        }
        if !matches!(v, Some(ArfcError::Version { .. })) {
            issues.push("corrupted version not rejected as version error");
        }
    }
    check(
        issues.is_empty(),
        if issues.is_empty() {
            "bitwise repeatable, round trips exact".into()
        } else {
            issues.join(", ")
        },
    )
}

/// Brute force: sort the whole gallery by (similarity desc, index asc) and
/// take the first position holding the query's pair.
fn brute_recall(q: &[Vec<f64>], g: &[Vec<f64>], qp: &[u32], gp: &[u32], k: usize) -> f64 {
    let hits = q
        .iter()
        .enumerate()
        .filter(|(i, qv)| {
            let mut order: Vec<(f64, usize)> = g
                .iter()
                .enumerate()
                .map(|(j, gv)| {
                    let (nq, ng) = (
                        qv.iter().map(|x| x * x).sum::<f64>().sqrt(),
                        gv.iter().map(|x| x * x).sum::<f64>().sqrt(),
                    );
                    (
                        qv.iter()
                            .zip(gv)
                            .map(|(a, b)| (a / nq) * (b / ng))
                            .sum::<f64>(),
                        j,
                    )
                })
                .collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            order.iter().position(|&(_, j)| gp[j] == qp[*i]).unwrap() < k
        })
        .count();
    100.0 * hits as f64 / q.len() as f64
}

fn brute_centroid(train: &[Vec<f64>], tl: &[u32], test: &[Vec<f64>], el: &[u32]) -> f64 {
    let mut classes: Vec<u32> = tl.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let centroids: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| {
            let members: Vec<&Vec<f64>> = train
                .iter()
                .zip(tl)
                .filter(|(_, &l)| l == c)
                .map(|(v, _)| v)
                .collect();
            let sum = members.iter().fold(vec![0.0; train[0].len()], |acc, v| {
                acc.iter().zip(*v).map(|(a, b)| a + b).collect()
            });
            unit(
                &sum.iter()
                    .map(|s| s / members.len() as f64)
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let correct = test
        .iter()
        .zip(el)
        .filter(|(v, &l)| {
            let u = unit(v);
            let sims: Vec<f64> = centroids
                .iter()
                .map(|c| c.iter().zip(&u).map(|(a, b)| a * b).sum())
                .collect();
            let best = (0..sims.len()).fold(0, |b, k| if sims[k] > sims[b] { k } else { b });
            classes[best] == l
        })
        .count();
    100.0 * correct as f64 / test.len() as f64
}

fn oracle_equivalence() -> Outcome {
    let mut rng = Rng::new(77);
    let mut mismatches = 0;
    for inst in 0..25 {
        let n = 2 + rng.below(199);
        let dim = 1 + rng.below(8);
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.normal()).collect())
            .collect();
        // exact duplicates force similarity ties
        for _ in 0..n / 4 {
            let (a, b) = (rng.below(n), rng.below(n));
            rows[a] = rows[b].clone();
        }
        let nq = 1 + rng.below(n);
        let queries: Vec<Vec<f64>> = (0..nq)
            .map(|_| {
                rows[rng.below(n)]
                    .iter()
                    .map(|x| x + 0.3 * rng.normal())
                    .collect()
            })
            .collect();
        let gp: Vec<u32> = (0..n).map(|_| rng.below(n.div_ceil(2)) as u32).collect();
        let qp: Vec<u32> = (0..nq).map(|_| gp[rng.below(n)]).collect();
        let to_tensor = |v: &[Vec<f64>]| Tensor::from_rows(v).unwrap();
        let ks = [1, 5, 10];
        let got = recall_at_k(&to_tensor(&queries), &to_tensor(&rows), &qp, &gp, &ks).unwrap();
        for (k, g) in ks.iter().zip(&got) {
            if *g != brute_recall(&queries, &rows, &qp, &gp, *k) {
                mismatches += 1;
            }
        }
        let classes = 1 + rng.below(8);
        let tl: Vec<u32> = (0..n)
            .map(|i| {
                if i < classes {
                    i as u32
                } else {
                    rng.below(classes) as u32
                }
            })
            .collect();
        let el: Vec<u32> = (0..nq).map(|_| rng.below(classes) as u32).collect();
        let got =
            nearest_centroid_accuracy(&to_tensor(&rows), &tl, &to_tensor(&queries), &el).unwrap();
        if got != brute_centroid(&rows, &tl, &queries, &el) {
            mismatches += 1;
            eprintln!("  centroid mismatch on instance {inst}");
        }
    }
    check(
        mismatches == 0,
        format!("{mismatches} mismatches over 25 instances"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 gradient suite", gradient_suite),
        ("2 prefix consistency", prefix_consistency),
        ("3 one model, any ratio", any_ratio_trend),
        ("4 PCA oracle comparison", pca_comparison),
        ("5 relation constraint efficacy", ergc_efficacy),
        ("6 component ordering", component_ordering),
        ("7 schedule comparison", schedule_comparison),
        ("8 Beta sampler statistics", beta_statistics),
        ("9 determinism and formats", determinism_and_formats),
        ("10 oracle equivalence", oracle_equivalence),
    ];
    let mut failed = vec![];
    for (name, f) in criteria {
        let began = Instant::now();
        let outcome = f();
        let secs = began.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("FAIL criterion {name}: {detail} [{secs:.1}s]");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        println!("{} of 10 criteria failed", failed.len());
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
