mod common;

use clbp::aggregate::AggregationConfig;
use clbp::closed_loop::LoopConfig;
use clbp::data::{make_gaussian_task, Split, TaskConfig};
use clbp::model::{ClbpModel, ModelConfig};
use clbp::optim::cosine_lr;
use clbp::tensor::{Tape, Tensor};
use clbp::train::{clbp_loss, loss_terms, train, TrainConfig, TrainState};
use clbp::Error;

fn small_split() -> Split {
    make_gaussian_task(&TaskConfig {
        n_train: 24,
        n_test: 0,
        ..TaskConfig::default()
    })
    .unwrap()
    .train
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        train_views: 2,
        ..TrainConfig::default()
    }
}

fn run(cfg: &TrainConfig) -> (ClbpModel, ClbpModel, TrainState) {
    let before = ClbpModel::new(ModelConfig::default()).unwrap();
    let mut after = before.clone();
    let agg = AggregationConfig::default();
    let state = train(&mut after, &small_split(), &LoopConfig::default(), &agg, cfg).unwrap();
    (before, after, state)
}

fn softmax(v: &[f64], t: f64) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| ((x - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn loss_terms_match_closed_forms() {
    let cfg = TrainConfig {
        margin: 1.0,
        temperature: 2.0,
        lambda_mar: 0.7,
        lambda_kl: 1.3,
        ..TrainConfig::default()
    };
    let adv = [2.0, 2.5, -1.0, 0.3];
    let clean = [3.0, 0.5, -0.5, 0.0];
    let label = 0;
    let tape = Tape::new();
    let a = tape.leaf(Tensor::vector(adv.to_vec()), true);
    let c = tape.constant(Tensor::vector(clean.to_vec()));
    let loss = clbp_loss(&tape, a, c, label, &cfg).unwrap();
    let got = loss_terms(&tape, &loss);

    let p = softmax(&adv, 1.0);
    let ce = -p[label].ln();
    let mar = (2.5 - 2.0 + cfg.margin).max(0.0);
    let (pc, pa) = (softmax(&clean, 2.0), softmax(&adv, 2.0));
    let kl: f64 = pc.iter().zip(&pa).map(|(u, v)| u * (u / v).ln()).sum();
    assert!((got.ce - ce).abs() < 1e-12);
    assert!((got.mar - mar).abs() < 1e-12);
    assert!((got.kl - kl).abs() < 1e-12);
    assert!((got.total - (ce + 0.7 * mar + 1.3 * kl)).abs() < 1e-12);

    let live = tape.leaf(Tensor::vector(clean.to_vec()), true);
    assert!(matches!(clbp_loss(&tape, a, live, label, &cfg), Err(Error::Config(_))));
}

#[test]
fn zero_rate_leaves_adapters_bit_identical() {
    let (before, after, state) = run(&TrainConfig {
        learning_rate: 0.0,
        ..small_cfg()
    });
    assert_eq!(before, after);
    assert_eq!(state.history.len(), 6);
    assert!(state.history.iter().all(|r| r.lr == 0.0 && r.grad_norm > 0.0));
}

#[test]
fn history_is_consistent() {
    let cfg = small_cfg();
    let (before, after, state) = run(&cfg);
    assert_eq!(state.total_steps, 6);
    assert_eq!(state.step, 6);
    assert_ne!(before.trainable(), after.trainable());
    assert_eq!(before.frozen_checksum(), after.frozen_checksum());
    assert_eq!(before.frozen(), after.frozen());
    for r in &state.history {
        let sum = r.ce + cfg.lambda_mar * r.mar + cfg.lambda_kl * r.kl;
        assert!((r.total - sum).abs() <= 1e-12 * r.total.abs().max(1.0));
        assert_eq!(r.lr, cosine_lr(cfg.learning_rate, r.step, state.total_steps));
        assert!(r.clipped_norm <= cfg.clip_norm + 1e-12);
        if r.grad_norm <= cfg.clip_norm {
            assert!((r.clipped_norm - r.grad_norm).abs() <= 1e-12);
        }
    }
    assert!(state.history.iter().any(|r| r.grad_norm > cfg.clip_norm));
}

#[test]
fn training_is_deterministic() {
    let cfg = small_cfg();
    let (_, a, sa) = run(&cfg);
    let (_, b, sb) = run(&cfg);
    assert_eq!(a, b);
    assert_eq!(sa.history, sb.history);
    let (_, c, _) = run(&TrainConfig { rng_seed: 9, ..cfg });
    assert_ne!(a, c);
}

#[test]
fn bad_settings_are_rejected() {
    let mut model = ClbpModel::new(ModelConfig::default()).unwrap();
    let agg = AggregationConfig::default();
    let lc = LoopConfig::default();
    let empty = Split::default();
    assert!(matches!(train(&mut model, &empty, &lc, &agg, &small_cfg()), Err(Error::Config(_))));
    let split = small_split();
    for bad in [
        TrainConfig { temperature: 0.0, ..small_cfg() },
        TrainConfig { batch_size: 0, ..small_cfg() },
        TrainConfig { lambda_kl: -1.0, ..small_cfg() },
        TrainConfig { learning_rate: f64::NAN, ..small_cfg() },
    ] {
        assert!(matches!(train(&mut model, &split, &lc, &agg, &bad), Err(Error::Config(_))));
    }
}
