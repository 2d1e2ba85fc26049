//! White-box l-infinity attacks through a whole [`Pipeline`].
//!
//! All three attacks share one projected sign-gradient engine:
//! `x <- clip_{x0, eps}(x + alpha * sign(g))`. They differ in the objective
//! (cross-entropy or the CW logit gap) and in how many stochastic forward
//! passes are averaged into `g`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::seed::{self, tag};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    CwMargin,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            "cw" | "cw_margin" => Ok(LossKind::CwMargin),
            other => Err(Error::config(format!("unknown attack loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub num_steps: usize,
    pub num_restarts: usize,
    pub eot_samples: usize,
    pub loss_kind: LossKind,
    pub rng_seed: u64,
    /// Reuse one set of view seeds for every step instead of drawing fresh ones.
    pub fixed_seed: bool,
    /// Also clip iterates to `[0, 1]`.
    pub clamp_unit: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            step_size: 0.075,
            num_steps: 20,
            num_restarts: 1,
            eot_samples: 1,
            loss_kind: LossKind::CrossEntropy,
            rng_seed: 0,
            fixed_seed: false,
            clamp_unit: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("attack.epsilon must be non-negative"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::config("attack.step_size must be positive"));
        }
        if self.eot_samples == 0 || self.num_restarts == 0 {
            return Err(Error::config("attack.eot_samples and attack.num_restarts must be at least 1"));
        }
        Ok(())
    }
}

/// One restart's final point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub x_adv: Tensor,
    pub loss: f64,
    /// Objective at each iterate before its update.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub loss: f64,
    pub trace: Vec<f64>,
    /// Index of the restart with the highest final loss.
    pub restart: usize,
    pub restarts: Vec<RestartOutcome>,
}

/// The attack objective on recorded logits (maximised by the attacker).
pub fn attack_loss(tape: &Tape, logits: Var, label: usize, kind: LossKind) -> Result<Var> {
    Ok(match kind {
        LossKind::CrossEntropy => tape.cross_entropy(logits, label)?,
        LossKind::CwMargin => tape.competitor_margin(logits, label)?,
    })
}

/// Objective value and its gradient with respect to the input.
pub fn loss_and_gradient(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    label: usize,
    kind: LossKind,
    view_seed: u64,
) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let logits = pipeline.logits_on(&tape, xv, view_seed)?;
    let loss = attack_loss(&tape, logits, label, kind)?;
    let grads = tape.backward(loss)?;
    Ok((tape.item(loss), grads.wrt(xv)))
}

/// Expectation-over-transformation gradient with its per-draw parts.
#[derive(Debug, Clone, PartialEq)]
pub struct EotGradient {
    pub mean: Tensor,
    pub mean_loss: f64,
    pub samples: Vec<Tensor>,
    pub losses: Vec<f64>,
}

/// Averages gradients over one forward/backward pass per seed.
pub fn eot_gradient(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    label: usize,
    kind: LossKind,
    seeds: &[u64],
) -> Result<EotGradient> {
    if seeds.is_empty() {
        return Err(Error::config("eot_gradient needs at least one seed"));
    }
    let mut samples = Vec::with_capacity(seeds.len());
    let mut losses = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let (l, g) = loss_and_gradient(pipeline, x, label, kind, s)?;
        samples.push(g);
        losses.push(l);
    }
    let n = seeds.len() as f64;
    let mut mean = Tensor::zeros(x.shape());
    for g in &samples {
        for (m, v) in mean.data_mut().iter_mut().zip(g.data()) {
            *m += v;
        }
    }
    mean.data_mut().iter_mut().for_each(|m| *m /= n);
    Ok(EotGradient {
        mean,
        mean_loss: losses.iter().sum::<f64>() / n,
        samples,
        losses,
    })
}

fn project(x: &mut Tensor, x0: &Tensor, eps: f64, clamp_unit: bool) {
    for (v, &r) in x.data_mut().iter_mut().zip(x0.data()) {
        *v = crate::tensor::project_scalar(*v, r, eps);
        if clamp_unit {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

fn run_restart(
    pipeline: &dyn Pipeline,
    x0: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    eot: usize,
    kind: LossKind,
    rng: &mut ChaCha8Rng,
    random_start: bool,
) -> Result<RestartOutcome> {
    let mut x = x0.clone();
    if random_start && cfg.epsilon > 0.0 {
        for v in x.data_mut() {
            *v += rng.random_range(-cfg.epsilon..=cfg.epsilon);
        }
        project(&mut x, x0, cfg.epsilon, cfg.clamp_unit);
    }
    let selection_seed: u64 = rng.random();
    let fixed: Vec<u64> = (0..eot).map(|_| rng.random()).collect();
    let mut trace = Vec::with_capacity(cfg.num_steps);
    for _ in 0..cfg.num_steps {
        let seeds: Vec<u64> = if cfg.fixed_seed {
            fixed.clone()
        } else {
            (0..eot).map(|_| rng.random()).collect()
        };
        let g = eot_gradient(pipeline, &x, label, kind, &seeds)?;
        trace.push(g.mean_loss);
        for (v, d) in x.data_mut().iter_mut().zip(g.mean.data()) {
            *v += cfg.step_size * crate::tensor::sign(*d);
        }
        project(&mut x, x0, cfg.epsilon, cfg.clamp_unit);
    }
    let logits = pipeline.logits(&x, selection_seed)?;
    let loss = {
        let tape = Tape::new();
        let l = tape.constant(logits);
        tape.item(attack_loss(&tape, l, label, kind)?)
    };
    Ok(RestartOutcome {
        x_adv: x,
        loss,
        trace,
    })
}

fn run_attack(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    eot: usize,
    kind: LossKind,
    stream: u64,
) -> Result<AttackResult> {
    cfg.validate()?;
    if label >= pipeline.num_classes() {
        return Err(Error::config(format!("label {label} out of range")));
    }
    let mut restarts = Vec::with_capacity(cfg.num_restarts);
    for r in 0..cfg.num_restarts {
        // Restart r's randomness depends only on (seed, stream, r), so the
        // first R restarts are shared between budgets R and R' > R.
        let s = seed::derive(cfg.rng_seed, &[tag::ATTACK, stream, tag::RESTART, r as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        restarts.push(run_restart(pipeline, x, label, cfg, eot, kind, &mut rng, r > 0)?);
    }
    let mut best = 0;
    for (i, r) in restarts.iter().enumerate() {
        if r.loss > restarts[best].loss {
            best = i;
        }
    }
    let winner = &restarts[best];
    Ok(AttackResult {
        x_adv: winner.x_adv.clone(),
        loss: winner.loss,
        trace: winner.trace.clone(),
        restart: best,
        restarts,
    })
}

/// PGD on cross-entropy with one forward pass per step.
pub fn pgd(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    stream: u64,
) -> Result<AttackResult> {
    run_attack(pipeline, x, label, cfg, 1, LossKind::CrossEntropy, stream)
}

/// PGD whose step direction averages `cfg.eot_samples` stochastic passes.
pub fn eot_pgd(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    stream: u64,
) -> Result<AttackResult> {
    run_attack(pipeline, x, label, cfg, cfg.eot_samples, cfg.loss_kind, stream)
}

/// PGD on the logit gap `max_{c != y} l_c - l_y`.
pub fn cw_linf(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    stream: u64,
) -> Result<AttackResult> {
    run_attack(pipeline, x, label, cfg, cfg.eot_samples, LossKind::CwMargin, stream)
}

/// Runs whichever attack `cfg` describes: its loss kind and EOT count.
pub fn attack(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    stream: u64,
) -> Result<AttackResult> {
    run_attack(pipeline, x, label, cfg, cfg.eot_samples, cfg.loss_kind, stream)
}
