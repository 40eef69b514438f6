use super::*;
use crate::decoderpool::decoder_activations;
use crate::featureio::{generate_synthetic, SynthConfig};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        arc: ArcConfig {
            dim: 16,
            tokens: 4,
            width: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            ..ArcConfig::default()
        },
        mos: MosConfig {
            solutions: 2,
            blocks: 1,
            heads: 2,
            ffn_mult: 2,
            pos_emb: true,
        },
        aux_decoders: 2,
        batch: 4,
        arc_steps: 4,
        mos_steps: 3,
        log_wall_time: false,
        ..TrainConfig::default()
    }
}

fn tiny_data() -> FeatureDataset {
    generate_synthetic(&SynthConfig {
        classes: 3,
        pairs_per_class: 5,
        dim: 16,
        latent_dim: 4,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn zero_steps_keeps_initial_weights() {
    let cfg = TrainConfig {
        arc_steps: 0,
        ..tiny_config()
    };
    let ckpt = train_arc(&cfg, &tiny_data(), &mut Discard).unwrap();
    assert_eq!(ckpt, Checkpoint::initial(&cfg).unwrap());
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data();
    let mut log_a = Vec::new();
    let mut log_b = Vec::new();
    let a = train_both(&tiny_config(), &data, &mut log_a).unwrap();
    let b = train_both(&tiny_config(), &data, &mut log_b).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.len(), 7);
}

#[test]
fn logged_totals_reassemble() {
    let mut log = Vec::new();
    train_both(&tiny_config(), &tiny_data(), &mut log).unwrap();
    for r in &log {
        let parts = crate::LossParts {
            rec: r.rec,
            aux: r.aux,
            ergc: r.ergc,
            total: r.total,
        };
        assert!((parts.reassemble(2, 0.5) - r.total).abs() <= 1e-6 * r.total.abs().max(1.0));
    }
}

#[test]
fn stages_touch_only_their_own_parameters() {
    let cfg = tiny_config();
    let data = tiny_data();
    let init = Checkpoint::initial(&cfg).unwrap();
    let stage1 = train_arc(&cfg, &data, &mut Discard).unwrap();
    assert_eq!(
        stage1.mos.params().fingerprint(),
        init.mos.params().fingerprint()
    );
    assert_eq!(
        stage1.mos_pool.params().fingerprint(),
        init.mos_pool.params().fingerprint()
    );
    assert_ne!(
        stage1.arc.params().fingerprint(),
        init.arc.params().fingerprint()
    );
    let stage2 = train_mos(stage1.clone(), &data, &mut Discard).unwrap();
    assert_eq!(
        stage2.arc.params().fingerprint(),
        stage1.arc.params().fingerprint()
    );
    assert_eq!(
        stage2.arc_pool.params().fingerprint(),
        stage1.arc_pool.params().fingerprint()
    );
    assert_ne!(
        stage2.mos.params().fingerprint(),
        stage1.mos.params().fingerprint()
    );
    assert!(stage2.arc.is_frozen());
}

#[test]
fn staged_run_matches_single_run() {
    let cfg = tiny_config();
    let data = tiny_data();
    let both = train_both(&cfg, &data, &mut Discard).unwrap();
    let stage1 = train_arc(&cfg, &data, &mut Discard).unwrap();
    let reloaded = Checkpoint::from_bytes(&stage1.to_bytes().unwrap()).unwrap();
    let staged = train_mos(reloaded, &data, &mut Discard).unwrap();
    assert_eq!(both.to_bytes().unwrap(), staged.to_bytes().unwrap());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ckpt = train_both(&tiny_config(), &tiny_data(), &mut Discard).unwrap();
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

#[test]
fn corrupted_checkpoints_rejected() {
    let bytes = Checkpoint::initial(&tiny_config())
        .unwrap()
        .to_bytes()
        .unwrap();
    let mut bad = bytes.clone();
    bad[1] = b'Z';
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(ArfcError::BadMagic { .. })
    ));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(ArfcError::Version { found: 2, .. })
    ));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(ArfcError::Truncated(_))
    ));
}

#[test]
fn mos_requires_finished_stage_one() {
    let cfg = tiny_config();
    assert!(train_mos(
        Checkpoint::initial(&cfg).unwrap(),
        &tiny_data(),
        &mut Discard
    )
    .is_err());
}

#[test]
fn dimension_mismatch_rejected() {
    let cfg = TrainConfig {
        arc: ArcConfig {
            dim: 32,
            tokens: 4,
            width: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            ..ArcConfig::default()
        },
        mos: MosConfig {
            heads: 2,
            ..tiny_config().mos
        },
        ..tiny_config()
    };
    assert!(matches!(
        train_arc(&cfg, &tiny_data(), &mut Discard),
        Err(ArfcError::Config(_))
    ));
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let cfg = TrainConfig {
        optimizer: AdamWConfig {
            lr: 1e300,
            ..AdamWConfig::default()
        },
        arc_steps: 50,
        ..tiny_config()
    };
    let mut log = Vec::new();
    let err = train_arc(&cfg, &tiny_data(), &mut log).unwrap_err();
    assert!(matches!(err, ArfcError::NonFinite { .. }));
    let last = log.last().unwrap();
    assert!(last.error.is_some() && last.total.is_nan());
}

#[test]
fn compress_shapes_and_batch_independence() {
    let ckpt = train_both(&tiny_config(), &tiny_data(), &mut Discard).unwrap();
    let data = tiny_data();
    let idx: Vec<usize> = (0..data.len()).collect();
    let all = data.features(&idx).unwrap();
    for use_mos in [false, true] {
        for r in [0.0, 0.25, 0.6] {
            let r = Ratio::new(r).unwrap();
            let codes = compress(&ckpt, &all, r, use_mos).unwrap();
            assert_eq!(codes.cols(), 4 * ratio_to_token_count(r, 4));
            for i in [0, 7, data.len() - 1] {
                let one = compress(&ckpt, &data.features(&[i]).unwrap(), r, use_mos).unwrap();
                assert_eq!(one.row(0), codes.row(i));
            }
        }
    }
    let full = compress(&ckpt, &all, Ratio::new(0.0).unwrap(), false).unwrap();
    assert_eq!(full, ckpt.arc.generate_batch(&all, 4).unwrap());
}

#[test]
fn compress_never_runs_decoders() {
    let ckpt = train_both(&tiny_config(), &tiny_data(), &mut Discard).unwrap();
    let all = tiny_data().all_features();
    let before = decoder_activations();
    for use_mos in [false, true] {
        compress(&ckpt, &all, Ratio::new(0.5).unwrap(), use_mos).unwrap();
    }
    assert_eq!(decoder_activations(), before);
}

#[test]
fn periodic_checkpoints_are_emitted() {
    struct Count(usize);
    impl TrainObserver for Count {
        fn record(&mut self, _rec: &TrainLogRecord) -> Result<()> {
            Ok(())
        }
        fn checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
            self.0 += 1;
            Ok(())
        }
    }
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..tiny_config()
    };
    let mut count = Count(0);
    train_arc(&cfg, &tiny_data(), &mut count).unwrap();
    // steps 2 and the final one
    assert_eq!(count.0, 2);
}

#[test]
fn config_validation() {
    assert!(TrainConfig {
        batch: 1,
        ..tiny_config()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        lambda: -0.1,
        ..tiny_config()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        ratios_per_step: 5,
        ..tiny_config()
    }
    .validate()
    .is_err());
    let json = serde_json::to_string(&tiny_config()).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, tiny_config());
    let partial: TrainConfig = serde_json::from_str(r#"{"lambda": 0.0}"#).unwrap();
    assert_eq!(partial.lambda, 0.0);
    assert_eq!(partial.batch, 32);
}

#[test]
fn cosine_decay_anneals_to_zero() {
    let mut cfg = tiny_config();
    assert_eq!(stage_optimizer(&cfg, 50, 100).lr, cfg.optimizer.lr);
    cfg.cosine_decay = true;
    assert_eq!(stage_optimizer(&cfg, 0, 100).lr, cfg.optimizer.lr);
    assert!((stage_optimizer(&cfg, 50, 100).lr - 0.5 * cfg.optimizer.lr).abs() < 1e-15);
    assert!(stage_optimizer(&cfg, 99, 100).lr < 1e-3 * cfg.optimizer.lr);
    assert_eq!(
        stage_optimizer(&cfg, 10, 100).weight_decay,
        cfg.optimizer.weight_decay
    );
}

#[test]
fn partial_json_config_keeps_defaults() {
    let cfg: TrainConfig =
        serde_json::from_str(r#"{"optimizer": {"lr": 0.01}, "cosine_decay": true}"#).unwrap();
    assert_eq!(cfg.optimizer.lr, 0.01);
    assert_eq!(
        cfg.optimizer.weight_decay,
        AdamWConfig::default().weight_decay
    );
    assert!(cfg.cosine_decay);
    assert_eq!(cfg.arc_steps, TrainConfig::default().arc_steps);
}
