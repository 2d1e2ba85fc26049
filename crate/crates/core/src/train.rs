//! Adversarial training of the adapters and context tokens.
//!
//! Each step attacks the current pipeline with a short PGD, runs the
//! adversarial and the clean input through loop and aggregation, and
//! minimises
//!
//! ```text
//! CE(l_adv, y) + lambda_mar * [max_{c != y} l_adv_c - l_adv_y + gamma]_+
//!              + lambda_kl * KL(softmax(l_clean / T) || softmax(l_adv / T))
//! ```
//!
//! with the clean logits detached.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationConfig;
use crate::attack::{self, AttackConfig};
use crate::closed_loop::LoopConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::ClbpModel;
use crate::optim::{self, AdamW};
use crate::pipeline::ClbpPipeline;
use crate::seed::{self, tag};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub inner_attack: AttackConfig,
    pub margin: f64,
    pub temperature: f64,
    pub lambda_mar: f64,
    pub lambda_kl: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Views per sample during training.
    pub train_views: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            inner_attack: AttackConfig {
                epsilon: 0.3,
                step_size: 0.3,
                num_steps: 2,
                ..AttackConfig::default()
            },
            margin: 1.0,
            temperature: 2.0,
            lambda_mar: 1.0,
            lambda_kl: 1.0,
            learning_rate: 2e-2,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            train_views: 4,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("temperature", self.temperature),
            ("clip_norm", self.clip_norm),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::config(format!("train.{name} must be positive")));
        }
        let non_negative = [
            ("margin", self.margin),
            ("lambda_mar", self.lambda_mar),
            ("lambda_kl", self.lambda_kl),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ];
        if let Some((name, _)) = non_negative.iter().find(|(_, v)| !(*v >= 0.0)) {
            return Err(Error::config(format!("train.{name} must be non-negative")));
        }
        if self.batch_size == 0 || self.train_views == 0 {
            return Err(Error::config("train.batch_size and train.train_views must be at least 1"));
        }
        self.inner_attack.validate()
    }

    /// Aggregation used inside training: the evaluation settings with the
    /// training view count.
    pub fn train_aggregation(&self, eval: &AggregationConfig) -> AggregationConfig {
        AggregationConfig {
            num_views: self.train_views,
            top_k: eval.top_k.min(if eval.exclude_self {
                self.train_views.saturating_sub(1).max(1)
            } else {
                self.train_views
            }),
            ..eval.clone()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub mar: Var,
    pub kl: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub mar: f64,
    pub kl: f64,
}

/// The three-term objective. `clean` must already be detached.
pub fn clbp_loss(
    tape: &Tape,
    adv: Var,
    clean: Var,
    label: usize,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    if tape.requires_grad(clean) {
        return Err(Error::config("clean logits must be detached"));
    }
    let ce = tape.cross_entropy(adv, label)?;
    let gap = tape.competitor_margin(adv, label)?;
    let mar = tape.hinge(tape.shift(gap, cfg.margin));
    let kl = tape.kl_div(clean, adv, cfg.temperature)?;
    let total = tape.add(
        tape.add(ce, tape.scale(mar, cfg.lambda_mar))?,
        tape.scale(kl, cfg.lambda_kl),
    )?;
    if !tape.value(total).is_finite() {
        return Err(crate::tensor::TensorError::NonFinite { op: "clbp_loss" }.into());
    }
    Ok(LossVars { total, ce, mar, kl })
}

pub fn loss_terms(tape: &Tape, v: &LossVars) -> LossTerms {
    LossTerms {
        total: tape.item(v.total),
        ce: tape.item(v.ce),
        mar: tape.item(v.mar),
        kl: tape.item(v.kl),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub mar: f64,
    pub kl: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub optimizer: AdamW,
    pub step: usize,
    pub total_steps: usize,
    pub history: Vec<StepRecord>,
}

struct SampleGrad {
    terms: LossTerms,
    grads: Vec<Tensor>,
}

fn sample_gradient(
    model: &ClbpModel,
    pipeline: &ClbpPipeline<'_>,
    x: &Tensor,
    y: usize,
    cfg: &TrainConfig,
    step: usize,
    index: usize,
    scale: f64,
) -> Result<SampleGrad> {
    let stream = seed::derive(cfg.rng_seed, &[tag::TRAIN, step as u64, index as u64]);
    let view_seed = seed::derive(stream, &[tag::DEFENSE]);
    let x_adv = attack::pgd(pipeline, x, y, &cfg.inner_attack, stream)?.x_adv;

    let tape = Tape::new();
    let bound = model.bind(&tape, true)?;
    let adv_in = tape.constant(x_adv);
    let clean_in = tape.constant(x.clone());
    let adv = pipeline.forward(&bound, adv_in, view_seed)?.logits;
    let clean_live = pipeline.forward(&bound, clean_in, view_seed)?.logits;
    let clean = tape.detach(clean_live);
    let loss = clbp_loss(&tape, adv, clean, y, cfg)?;
    let scaled = tape.scale(loss.total, scale);
    let grads = tape.backward(scaled)?;
    Ok(SampleGrad {
        terms: loss_terms(&tape, &loss),
        grads: bound.trainable_vars().into_iter().map(|v| grads.wrt(v)).collect(),
    })
}

/// Trains `model` in place and returns the optimizer state and step log.
pub fn train(
    model: &mut ClbpModel,
    data: &Split,
    loop_cfg: &LoopConfig,
    aggregation: &AggregationConfig,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let agg = cfg.train_aggregation(aggregation);
    agg.validate()?;
    let frozen_before = model.frozen_checksum();
    let sizes: Vec<usize> = model.trainable().iter().map(|(_, t)| t.len()).collect();
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut state = TrainState {
        optimizer: AdamW::new(&sizes, cfg.weight_decay),
        step: 0,
        total_steps,
        history: Vec::with_capacity(total_steps),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.rng_seed, &[tag::TRAIN, epoch as u64]));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = state.step;
            let scale = 1.0 / batch.len() as f64;
            let snapshot: &ClbpModel = model;
            let pipeline = ClbpPipeline::new(snapshot, loop_cfg.clone(), agg.clone());
            let parts: Vec<SampleGrad> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    sample_gradient(snapshot, &pipeline, &data.xs[i], data.ys[i], cfg, step, j, scale)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Tensor(crate::tensor::TensorError::NonFinite { .. }) => {
                        Error::NonFiniteLoss { step }
                    }
                    other => other,
                })?;
            let mut grads: Vec<Tensor> = sizes
                .iter()
                .zip(model.trainable())
                .map(|(_, (_, t))| Tensor::zeros(t.shape()))
                .collect();
            let mut terms = LossTerms {
                total: 0.0,
                ce: 0.0,
                mar: 0.0,
                kl: 0.0,
            };
            for p in &parts {
                for (acc, g) in grads.iter_mut().zip(&p.grads) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
                terms.total += p.terms.total * scale;
                terms.ce += p.terms.ce * scale;
                terms.mar += p.terms.mar * scale;
                terms.kl += p.terms.kl * scale;
            }
            if !terms.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grad_norm = optim::clip_global_norm(&mut grads, cfg.clip_norm);
            let clipped_norm = optim::global_norm(&grads);
            let lr = optim::cosine_lr(cfg.learning_rate, step, total_steps);
            state
                .optimizer
                .step(&mut model.trainable_mut(), &grads, lr);
            state.history.push(StepRecord {
                step,
                lr,
                ce: terms.ce,
                mar: terms.mar,
                kl: terms.kl,
                total: terms.total,
                grad_norm,
                clipped_norm,
            });
            state.step += 1;
        }
    }
    if model.frozen_checksum() != frozen_before {
        return Err(Error::FrozenWeightsChanged);
    }
    Ok(state)
}
