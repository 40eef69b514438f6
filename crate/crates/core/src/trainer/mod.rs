//! Two-stage training: stage 1 fits the compressor and its decoder pool,
//! stage 2 freezes the compressor and fits the mixture-of-solutions model
//! with its own pool. Also the inference-time `compress` path.

mod checkpoint;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, OptimGroups, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::arc::{arc_forward_loss, ArcConfig, LossOutput};
use crate::decoderpool::DecoderPool;
use crate::error::{ArfcError, Result};
use crate::featureio::{BatchStream, FeatureDataset};
use crate::mos::{mos_forward_loss, MosConfig};
use crate::numkit::{
    adamw_step, clip_global_norm, AdamState, AdamWConfig, LayerParams, Rng, Tensor,
};
use crate::schedule::{BetaSchedule, ScheduleMode};
use crate::tokenizer::{ratio_to_token_count, Ratio};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arc: ArcConfig,
    pub mos: MosConfig,
    /// Auxiliary decoders per cluster (`M`).
    pub aux_decoders: usize,
    pub lambda: f64,
    pub batch: usize,
    pub arc_steps: u64,
    pub mos_steps: u64,
    /// Distinct grid ratios sampled per step.
    pub ratios_per_step: usize,
    /// Ratio schedule of stage 1; stage 2 always samples uniformly.
    pub schedule: ScheduleMode,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Cosine-anneal the learning rate to zero over each stage.
    pub cosine_decay: bool,
    pub clip_norm: f64,
    /// Keep both views of a pair in the same batch.
    pub paired: bool,
    /// Train only on the non-held-out split.
    pub holdout: bool,
    /// Emit a checkpoint to the observer every this many steps (0 = never).
    pub checkpoint_every: u64,
    /// Record wall-clock milliseconds in the log; off gives byte-stable logs.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arc: ArcConfig::default(),
            mos: MosConfig::default(),
            aux_decoders: 5,
            lambda: 0.5,
            batch: 32,
            arc_steps: 2000,
            mos_steps: 1000,
            ratios_per_step: 2,
            schedule: ScheduleMode::Progressive,
            seed: 0,
            optimizer: AdamWConfig::default(),
            cosine_decay: false,
            clip_norm: 1.0,
            paired: true,
            holdout: true,
            checkpoint_every: 0,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arc.validate()?;
        self.mos.validate(self.arc.dim)?;
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(ArfcError::config("lambda must be non-negative"));
        }
        if self.batch < 2 {
            return Err(ArfcError::config("batch size must be at least 2"));
        }
        if self.aux_decoders == 0 {
            return Err(ArfcError::config(
                "at least one auxiliary decoder per cluster",
            ));
        }
        if self.ratios_per_step == 0 || self.ratios_per_step > self.arc.tokens {
            return Err(ArfcError::config(format!(
                "ratios per step must lie in [1, {}]",
                self.arc.tokens
            )));
        }
        if self.clip_norm.is_nan()
            || self.clip_norm <= 0.0
            || self.optimizer.lr.is_nan()
            || self.optimizer.lr <= 0.0
        {
            return Err(ArfcError::config(
                "clip norm and learning rate must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Arc,
    Mos,
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub stage: Stage,
    pub step: u64,
    pub ratios: Vec<f64>,
    pub rec: f64,
    pub aux: f64,
    pub ergc: f64,
    pub total: f64,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Receives log records and periodic checkpoints.
pub trait TrainObserver {
    fn record(&mut self, rec: &TrainLogRecord) -> Result<()>;

    fn checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for Vec<TrainLogRecord> {
    fn record(&mut self, rec: &TrainLogRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct Discard;

impl TrainObserver for Discard {
    fn record(&mut self, _rec: &TrainLogRecord) -> Result<()> {
        Ok(())
    }
}

const ARC_TAG: u64 = 0x41;
const MOS_TAG: u64 = 0x4d;

fn training_split(config: &TrainConfig, dataset: &FeatureDataset) -> Result<FeatureDataset> {
    if dataset.dim() != config.arc.dim {
        return Err(ArfcError::config(format!(
            "dataset dimension {} does not match configured D={}",
            dataset.dim(),
            config.arc.dim
        )));
    }
    let train = if config.holdout {
        dataset.holdout_split().0
    } else {
        dataset.clone()
    };
    if train.is_empty() {
        return Err(ArfcError::invalid("no training records"));
    }
    Ok(train)
}

fn batch_stream(
    config: &TrainConfig,
    train: &FeatureDataset,
    tag: u64,
    skip: u64,
) -> Result<BatchStream> {
    let seed = Rng::new(config.seed).derive_path(&[tag, 0]).next_u64();
    let mut stream = BatchStream::new(train, config.batch, seed, config.paired)?;
    for _ in 0..skip {
        stream.next_batch();
    }
    Ok(stream)
}

fn step_rng(config: &TrainConfig, tag: u64, step: u64) -> Rng {
    Rng::new(config.seed).derive_path(&[tag, 1, step])
}

struct StepOutcome {
    ratios: Vec<Ratio>,
    loss: LossOutput,
}

fn diagnostic(stage: Stage, step: u64, ratios: &[Ratio], err: &ArfcError) -> TrainLogRecord {
    TrainLogRecord {
        stage,
        step,
        ratios: ratios.iter().map(|r| r.value()).collect(),
        rec: f64::NAN,
        aux: f64::NAN,
        ergc: f64::NAN,
        total: f64::NAN,
        wall_ms: 0.0,
        error: Some(err.to_string()),
    }
}

fn stage_optimizer(config: &TrainConfig, step: u64, total: u64) -> AdamWConfig {
    let mut cfg = config.optimizer;
    if config.cosine_decay && total > 0 {
        cfg.lr *= 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
    }
    cfg
}

/// Clip jointly, then update the model and every routed cluster.
fn apply_update(
    config: &TrainConfig,
    optimizer: &AdamWConfig,
    model: &mut LayerParams,
    pool: &mut DecoderPool,
    optim: &mut OptimGroups,
    loss: LossOutput,
) -> Result<()> {
    let LossOutput {
        mut model_grads,
        mut cluster_grads,
        ..
    } = loss;
    {
        let mut groups: Vec<&mut LayerParams> = std::iter::once(&mut model_grads)
            .chain(cluster_grads.values_mut())
            .collect();
        clip_global_norm(&mut groups, config.clip_norm);
    }
    adamw_step(model, &model_grads, &mut optim.model, optimizer)?;
    for (j, g) in &cluster_grads {
        let cluster = pool.cluster_mut(*j)?;
        let state = optim
            .clusters
            .entry(*j)
            .or_insert_with(|| AdamState::for_params(cluster.params()));
        adamw_step(cluster.params_mut(), g, state, optimizer)?;
        if !cluster.params().is_finite() {
            return Err(ArfcError::NonFinite {
                op: "decoder update",
            });
        }
    }
    if !model.is_finite() {
        return Err(ArfcError::NonFinite { op: "model update" });
    }
    Ok(())
}

fn run_stage(
    ckpt: &mut Checkpoint,
    dataset: &FeatureDataset,
    stage: Stage,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let config = ckpt.config.clone();
    let train = training_split(&config, dataset)?;
    let (tag, start, total, schedule) = match stage {
        Stage::Arc => (
            ARC_TAG,
            ckpt.arc_step,
            config.arc_steps,
            BetaSchedule::new(config.schedule, config.arc_steps),
        ),
        Stage::Mos => (
            MOS_TAG,
            ckpt.mos_step,
            config.mos_steps,
            BetaSchedule::new(ScheduleMode::Uniform, config.mos_steps),
        ),
    };
    let mut stream = batch_stream(&config, &train, tag, start)?;
    let tokens = config.arc.tokens;
    for step in start..total {
        let began = Instant::now();
        let features = train.features(&stream.next_batch())?;
        let rng = step_rng(&config, tag, step);
        let ratios = schedule.sample_batch_ratios(
            step,
            config.ratios_per_step,
            tokens,
            &mut rng.derive(0),
        )?;
        let outcome = (|| -> Result<StepOutcome> {
            let loss = match stage {
                Stage::Arc => arc_forward_loss(
                    &ckpt.arc,
                    &features,
                    &ratios,
                    &ckpt.arc_pool,
                    config.lambda,
                    &rng.derive(1),
                )?,
                Stage::Mos => {
                    mos_forward_loss(
                        &ckpt.arc,
                        &ckpt.mos,
                        &features,
                        &ratios,
                        &ckpt.mos_pool,
                        config.lambda,
                        &rng.derive(1),
                    )?
                    .loss
                }
            };
            if !loss.parts.total.is_finite() {
                return Err(ArfcError::NonFinite { op: "loss" });
            }
            Ok(StepOutcome {
                ratios: ratios.clone(),
                loss,
            })
        })();
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                observer.record(&diagnostic(stage, step, &ratios, &e))?;
                return Err(e);
            }
        };
        let parts = outcome.loss.parts;
        let optimizer = stage_optimizer(&config, step, total);
        let updated = match stage {
            Stage::Arc => apply_update(
                &config,
                &optimizer,
                ckpt.arc.params_mut()?,
                &mut ckpt.arc_pool,
                &mut ckpt.arc_optim,
                outcome.loss,
            ),
            Stage::Mos => apply_update(
                &config,
                &optimizer,
                ckpt.mos.params_mut(),
                &mut ckpt.mos_pool,
                &mut ckpt.mos_optim,
                outcome.loss,
            ),
        };
        if let Err(e) = updated {
            observer.record(&diagnostic(stage, step, &ratios, &e))?;
            return Err(e);
        }
        match stage {
            Stage::Arc => ckpt.arc_step = step + 1,
            Stage::Mos => ckpt.mos_step = step + 1,
        }
        observer.record(&TrainLogRecord {
            stage,
            step,
            ratios: outcome.ratios.iter().map(|r| r.value()).collect(),
            rec: parts.rec,
            aux: parts.aux,
            ergc: parts.ergc,
            total: parts.total,
            wall_ms: if config.log_wall_time {
                began.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
            error: None,
        })?;
        if config.checkpoint_every > 0
            && (step + 1) % config.checkpoint_every == 0
            && step + 1 < total
        {
            let mut snapshot = ckpt.clone();
            snapshot.round_to_f32();
            observer.checkpoint(&snapshot)?;
        }
    }
    ckpt.round_to_f32();
    observer.checkpoint(ckpt)
}

/// Stage 1 from freshly initialised weights.
pub fn train_arc(
    config: &TrainConfig,
    dataset: &FeatureDataset,
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::initial(config)?;
    continue_arc(&mut ckpt, dataset, observer)?;
    Ok(ckpt)
}

/// Run stage 1 up to the configured step budget.
pub fn continue_arc(
    ckpt: &mut Checkpoint,
    dataset: &FeatureDataset,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    if ckpt.arc.is_frozen() {
        return Err(ArfcError::invalid("the compressor is already frozen"));
    }
    run_stage(ckpt, dataset, Stage::Arc, observer)
}

/// Stage 2 on top of a stage-1 checkpoint. The compressor is frozen first.
pub fn train_mos(
    mut ckpt: Checkpoint,
    dataset: &FeatureDataset,
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    if ckpt.arc_step < ckpt.config.arc_steps {
        return Err(ArfcError::invalid(format!(
            "stage 1 incomplete ({} of {} steps)",
            ckpt.arc_step, ckpt.config.arc_steps
        )));
    }
    ckpt.arc.freeze();
    run_stage(&mut ckpt, dataset, Stage::Mos, observer)?;
    Ok(ckpt)
}

/// Both stages back to back.
pub fn train_both(
    config: &TrainConfig,
    dataset: &FeatureDataset,
    observer: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    let ckpt = train_arc(config, dataset, observer)?;
    train_mos(ckpt, dataset, observer)
}

/// Inference: compress every row of `features` (`[N, D]`) to ratio `r`.
///
/// Without MoS only the needed tokens are generated. With MoS the full code
/// is generated and refined (all `K` solutions identical) before
/// truncation. Decoders are never run.
pub fn compress(ckpt: &Checkpoint, features: &Tensor, r: Ratio, use_mos: bool) -> Result<Tensor> {
    let cfg = ckpt.arc.config();
    let kept = ratio_to_token_count(r, cfg.tokens);
    if !use_mos {
        return ckpt.arc.generate_batch(features, kept);
    }
    let full = ckpt.arc.generate_batch(features, cfg.tokens)?;
    let refined = ckpt.mos.refine_batch(&full)?;
    let width = kept * cfg.token_dim();
    let mut data = Vec::with_capacity(refined.rows() * width);
    for i in 0..refined.rows() {
        data.extend_from_slice(&refined.row(i)[..width]);
    }
    Tensor::matrix(refined.rows(), width, data)
}

#[cfg(test)]
mod tests;
