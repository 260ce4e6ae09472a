use caid::data::{generate_synthetic, AugConfig, Dataset, SyntheticConfig};
use caid::nn::Method;
use caid::train::{pretrain, Checkpoint, Phase, RunConfig, TrainError};

fn data(n: i64) -> Dataset {
    generate_synthetic(&SyntheticConfig { n, ..Default::default() }, 11).unwrap()
}

fn small(method: Method, warmup: usize, joint: usize) -> RunConfig {
    RunConfig {
        method,
        epochs_warmup: warmup,
        epochs_joint: joint,
        batch_size: 16,
        queue_size: 32,
        ..Default::default()
    }
}

#[test]
fn metrics_have_one_row_per_epoch_with_phase() {
    let out = pretrain(&small(Method::SimSiam, 2, 1), &data(64)).unwrap();
    let phases: Vec<(usize, Phase)> = out.metrics.iter().map(|m| (m.epoch, m.phase)).collect();
    assert_eq!(phases, vec![(1, Phase::Warmup), (2, Phase::Warmup), (3, Phase::Joint)]);
    // 64 images, 10% validation, batch 16: 3 steps per epoch
    assert_eq!(out.steps.len(), 9);
    assert!(out.steps.iter().filter(|s| s.phase == Phase::Warmup).all(|s| s.l_ca.is_none()));
    assert!(out.steps.iter().filter(|s| s.phase == Phase::Joint).all(|s| s.l_ca.is_some()));
    // a joint run picks its best checkpoint from joint epochs only
    assert_eq!(out.best.epoch, 3);
    assert!(out.metrics.iter().all(|m| m.val_loss.is_finite()));
}

#[test]
fn identical_configs_give_identical_checkpoints() {
    let d = data(64);
    let cfg = small(Method::MocoV2, 1, 1);
    let a = pretrain(&cfg, &d).unwrap();
    let b = pretrain(&cfg, &d).unwrap();
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
    assert_eq!(a.steps, b.steps);
    let other = pretrain(&RunConfig { seeds: caid::train::Seeds::all(99), ..cfg }, &d).unwrap();
    assert_ne!(a.last.to_bytes().unwrap(), other.last.to_bytes().unwrap());
}

#[test]
fn checkpoint_restores_model_and_carries_config_hash() {
    let cfg = small(Method::MocoV2, 1, 1);
    let out = pretrain(&cfg, &data(64)).unwrap();
    assert_eq!(out.last.config_hash, cfg.hash());
    let bytes = out.last.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    let mut fresh = caid::nn::Model::build(cfg.method, &cfg.encoder, 12345).unwrap();
    back.restore(&mut fresh).unwrap();
    assert_eq!(fresh.online, out.model.online);
    assert_eq!(fresh.momentum, out.model.momentum);
}

#[test]
fn discrimination_only_checkpoints_omit_the_untrained_decoder() {
    let plain = pretrain(&small(Method::BarlowTwins, 1, 0), &data(48)).unwrap();
    assert!(plain.best.tensors.iter().all(|(n, _)| !n.starts_with("decoder.")));
    assert!(plain.best.tensors.iter().any(|(n, _)| n.starts_with("encoder.")));
    let joint = pretrain(&small(Method::BarlowTwins, 0, 1), &data(48)).unwrap();
    assert!(joint.best.tensors.iter().any(|(n, _)| n.starts_with("decoder.")));
}

#[test]
fn training_reduces_the_discrimination_loss() {
    // full-size crops with every stochastic op off: the positive key is the
    // query image itself, so the loss must fall quickly
    let cfg = RunConfig {
        augment: AugConfig {
            crop_size: 32,
            ..AugConfig::disabled()
        },
        ..small(Method::MocoV2, 5, 0)
    };
    let out = pretrain(&cfg, &data(96)).unwrap();
    let first = out.metrics.first().unwrap().train_loss;
    let last = out.metrics.last().unwrap().train_loss;
    assert!(last < first, "train loss {first} -> {last}");
}

#[test]
fn bad_inputs_are_rejected() {
    let empty = Dataset::default();
    assert!(matches!(pretrain(&small(Method::SimSiam, 1, 0), &empty), Err(TrainError::EmptyDataset)));
    let cfg = RunConfig {
        batch_size: 64,
        ..small(Method::SimSiam, 1, 0)
    };
    assert!(matches!(pretrain(&cfg, &data(40)), Err(TrainError::BatchTooLarge { .. })));
    let cfg = RunConfig {
        tau: 0.0,
        ..small(Method::MocoV2, 1, 0)
    };
    assert!(pretrain(&cfg, &data(40)).is_err());
}
