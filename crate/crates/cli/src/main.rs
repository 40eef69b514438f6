use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arfc_core::ergc::build_graph;
use arfc_core::evalkit::{evaluate_pipeline, evaluate_raw, EvalReport};
use arfc_core::featureio::{epoch_batches, generate_synthetic, FeatureDataset, SynthConfig};
use arfc_core::numkit::Rng;
use arfc_core::schedule::{BetaSchedule, ScheduleMode};
use arfc_core::tokenizer::{ratio_to_token_count, Ratio};
use arfc_core::trainer::{
    compress, continue_arc, train_mos, Checkpoint, TrainConfig, TrainLogRecord, TrainObserver,
};
use arfc_core::{ArfcError, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Arbitrary-ratio feature compression.
#[derive(Parser, Debug)]
#[command(name = "arfc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired-embedding dataset.
    GenData(GenData),
    /// Train the compressor and/or the mixture-of-solutions stage.
    Train(Train),
    /// Compress a dataset to a given ratio.
    Compress(Compress),
    /// Retrieval, classification and reconstruction metrics.
    Evaluate(Evaluate),
    /// Summaries of checkpoints, datasets, relation graphs and schedules.
    Inspect(Inspect),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 16)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    pairs_per_class: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 24)]
    latent_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.6)]
    spread: f64,
    #[arg(long, default_value_t = 0.3)]
    modality_gap: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Arc,
    Mos,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    Progressive,
    Uniform,
    FullGrid,
}

impl From<ScheduleArg> for ScheduleMode {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Progressive => ScheduleMode::Progressive,
            ScheduleArg::Uniform => ScheduleMode::Uniform,
            ScheduleArg::FullGrid => ScheduleMode::FullGrid,
        }
    }
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// JSON training config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StageArg::Both)]
    stage: StageArg,
    /// Stage-1 ratio schedule (overrides the config).
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stage-1 checkpoint to continue from (required for `--stage mos`).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines log path; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Compress {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ratio: f64,
    #[arg(long)]
    use_mos: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Evaluate {
    #[arg(long, required_unless_present = "raw")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.75,0.875")]
    ratios: Vec<f64>,
    #[arg(long)]
    use_mos: bool,
    /// Evaluate the uncompressed features instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    raw: bool,
    /// JSON report path; a CSV mirror is written next to it. Without it the
    /// JSON goes to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false, id = "target")]
struct InspectTarget {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Preview a ratio schedule.
    #[arg(long, value_enum)]
    schedule: Option<ScheduleArg>,
}

#[derive(Args, Debug)]
struct Inspect {
    #[command(flatten)]
    target: InspectTarget,
    /// With `--data`: print the relation graph of this batch as CSV.
    #[arg(long, requires = "data")]
    graph: Option<usize>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// With `--schedule`: total steps of the previewed schedule.
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 8)]
    tokens: usize,
}

fn exit_code(err: &ArfcError) -> u8 {
    match err {
        ArfcError::NonFinite { .. } => 3,
        ArfcError::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Compress(a) => run_compress(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = SynthConfig {
        classes: a.classes,
        pairs_per_class: a.pairs_per_class,
        dim: a.dim,
        latent_dim: a.latent_dim,
        noise: a.noise,
        spread: a.spread,
        modality_gap: a.modality_gap,
        seed: a.seed,
    };
    eprintln!("config: {}", serde_json::to_string(&cfg)?);
    eprintln!("seed: {}", cfg.seed);
    let ds = generate_synthetic(&cfg)?;
    ds.save(&a.out)?;
    eprintln!(
        "wrote {} records of dimension {} ({} classes) to {}",
        ds.len(),
        ds.dim(),
        ds.class_count(),
        a.out.display()
    );
    Ok(())
}

struct FileObserver {
    log: BufWriter<fs::File>,
    ckpt_path: PathBuf,
}

impl TrainObserver for FileObserver {
    fn record(&mut self, rec: &TrainLogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.log, rec)?;
        self.log.write_all(b"\n")?;
        if let Some(err) = &rec.error {
            eprintln!(
                "diagnostic: {:?} stage step {} ratios {:?}: {err}",
                rec.stage, rec.step, rec.ratios
            );
        }
        Ok(())
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.log.flush()?;
        ckpt.save(&self.ckpt_path)
    }
}

fn train(a: Train) -> Result<()> {
    let dataset = FeatureDataset::load(&a.data)?;
    let mut ckpt = match (a.stage, &a.ckpt) {
        (StageArg::Mos, None) => {
            return Err(ArfcError::InvalidArgument(
                "--stage mos needs --ckpt".into(),
            ))
        }
        (StageArg::Mos, Some(path)) => {
            if a.config.is_some() || a.schedule.is_some() || a.seed.is_some() {
                return Err(ArfcError::InvalidArgument(
                    "stage mos takes its config from --ckpt".into(),
                ));
            }
            Checkpoint::load(path)?
        }
        (_, Some(_)) => {
            return Err(ArfcError::InvalidArgument(
                "--ckpt is only used with --stage mos".into(),
            ))
        }
        (_, None) => {
            let mut cfg = match &a.config {
                Some(p) => serde_json::from_str::<TrainConfig>(&fs::read_to_string(p)?)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = a.schedule {
                cfg.schedule = s.into();
            }
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            Checkpoint::initial(&cfg)?
        }
    };
    eprintln!("config: {}", serde_json::to_string(&ckpt.config)?);
    eprintln!("seed: {}", ckpt.config.seed);
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        p.into()
    });
    let mut observer = FileObserver {
        log: BufWriter::new(fs::File::create(&log_path)?),
        ckpt_path: a.out.clone(),
    };
    if a.stage != StageArg::Mos {
        continue_arc(&mut ckpt, &dataset, &mut observer)?;
    }
    if a.stage != StageArg::Arc {
        ckpt = train_mos(ckpt, &dataset, &mut observer)?;
    }
    observer.log.flush()?;
    ckpt.save(&a.out)?;
    eprintln!(
        "wrote checkpoint {} (stage-1 steps {}, stage-2 steps {}) and log {}",
        a.out.display(),
        ckpt.arc_step,
        ckpt.mos_step,
        log_path.display()
    );
    Ok(())
}

fn run_compress(a: Compress) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let dataset = FeatureDataset::load(&a.input)?;
    let tokens = ckpt.arc.config().tokens;
    let requested = Ratio::new(a.ratio)?;
    let effective = requested.snap(tokens);
    eprintln!("config: {}", serde_json::to_string(&ckpt.config)?);
    eprintln!("seed: {}", ckpt.config.seed);
    eprintln!(
        "ratio {} -> effective {} ({} of {tokens} tokens){}",
        requested.value(),
        effective.value(),
        ratio_to_token_count(requested, tokens),
        if a.use_mos { ", refined" } else { "" }
    );
    if dataset.dim() != ckpt.arc.config().dim {
        return Err(ArfcError::Config(format!(
            "dataset dimension {} vs checkpoint D={}",
            dataset.dim(),
            ckpt.arc.config().dim
        )));
    }
    let codes = compress(&ckpt, &dataset.all_features(), requested, a.use_mos)?;
    let out = dataset.with_features(&codes)?;
    out.save(&a.out)?;
    eprintln!(
        "wrote {} codes of dimension {} to {}",
        out.len(),
        out.dim(),
        a.out.display()
    );
    Ok(())
}

fn write_report(report: &EvalReport, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, report.to_json()?)?;
            let csv = p.with_extension("csv");
            fs::write(&csv, report.to_csv()?)?;
            eprintln!("wrote {} and {}", p.display(), csv.display());
        }
        None => println!("{}", report.to_json()?),
    }
    Ok(())
}

fn evaluate(a: Evaluate) -> Result<()> {
    let dataset = FeatureDataset::load(&a.data)?;
    let report = if a.raw {
        eprintln!("evaluating raw features of {}", a.data.display());
        evaluate_raw(&dataset)?
    } else {
        let path = a.ckpt.as_ref().expect("clap enforces --ckpt without --raw");
        let ckpt = Checkpoint::load(path)?;
        eprintln!("config: {}", serde_json::to_string(&ckpt.config)?);
        eprintln!("seed: {}", ckpt.config.seed);
        let ratios = a
            .ratios
            .iter()
            .map(|&r| Ratio::new(r))
            .collect::<Result<Vec<_>>>()?;
        let tokens = ckpt.arc.config().tokens;
        let effective: Vec<f64> = ratios.iter().map(|r| r.snap(tokens).value()).collect();
        eprintln!("ratios {:?} -> effective {effective:?}", a.ratios);
        evaluate_pipeline(&ckpt, &dataset, &ratios, a.use_mos)?
    };
    for row in &report.rows {
        eprintln!(
            "r={:<7} {} R@1 {:6.2} R@5 {:6.2} R@10 {:6.2} mse {:.5} pca {:.5} acc {:6.2} rel {:.5}",
            row.ratio,
            row.direction,
            row.r1,
            row.r5,
            row.r10,
            row.mse,
            row.pca_mse,
            row.centroid_acc,
            row.relation_err
        );
    }
    write_report(&report, a.report.as_deref())
}

fn inspect(a: Inspect) -> Result<()> {
    let t = a.target;
    if let Some(path) = t.ckpt {
        let ckpt = Checkpoint::load(&path)?;
        let counts = ckpt.param_counts();
        let cfg = &ckpt.config;
        let summary = serde_json::json!({
            "config": cfg,
            "arc_step": ckpt.arc_step,
            "mos_step": ckpt.mos_step,
            "arc_frozen": ckpt.arc.is_frozen(),
            "params": counts,
            "total_params": counts.values().sum::<usize>(),
            "arc_fingerprint": ckpt.arc.params().fingerprint(),
            "mos_fingerprint": ckpt.mos.params().fingerprint(),
        });
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else if let Some(path) = t.data {
        let ds = FeatureDataset::load(&path)?;
        if let Some(index) = a.graph {
            let batches = epoch_batches(&ds, a.batch, a.seed, true)?;
            let batch = batches.get(index).ok_or_else(|| {
                ArfcError::InvalidArgument(format!("batch {index} of {}", batches.len()))
            })?;
            print!("{}", build_graph(&ds.features(batch)?)?.to_csv()?);
        } else {
            let modalities = [0u8, 1].map(|m| ds.modality_indices(m).len());
            let summary = serde_json::json!({
                "records": ds.len(),
                "dim": ds.dim(),
                "classes": ds.class_count(),
                "modality_counts": modalities,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    } else if let Some(mode) = t.schedule {
        let schedule = BetaSchedule::new(mode.into(), a.steps);
        let mut rng = Rng::new(a.seed);
        println!("step,alpha,beta,mean_kept_tokens");
        for i in 0..=10 {
            let step = a.steps * i / 10;
            let kept: f64 = (0..1000)
                .map(|_| {
                    ratio_to_token_count(schedule.sample_ratio(step, a.tokens, &mut rng), a.tokens)
                        as f64
                })
                .sum::<f64>()
                / 1000.0;
            println!(
                "{step},{},{},{kept}",
                schedule.alpha_at(step),
                schedule.beta
            );
        }
    }
    Ok(())
}
