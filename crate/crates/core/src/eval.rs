//! Clean and robust accuracy over a labelled split.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::pipeline::Pipeline;
use crate::seed::{self, tag};

/// Per-sample evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub clean_correct: bool,
    /// Correct on the clean input and on every restart's adversarial point.
    pub robust_correct: bool,
    /// Index of the first restart whose point fools the defence. Restarts are
    /// nested, so a run with fewer restarts would have stopped at the same one.
    pub first_failure: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub seconds_per_sample: f64,
    pub samples: Vec<SampleOutcome>,
}

/// Seed the defence uses for sample `index`; disjoint from attack streams.
pub fn defense_seed(eval_seed: u64, index: usize) -> u64 {
    seed::derive(eval_seed, &[tag::DEFENSE, index as u64])
}

/// Evaluates `defense` on `split`. When `attack_cfg` is set, each sample is
/// attacked through `surrogate` (the same pipeline, seen from the attacker's
/// side) and counts as robust only if the defence, run with its own fresh
/// view seed, classifies every restart's point correctly.
pub fn evaluate(
    defense: &dyn Pipeline,
    surrogate: &dyn Pipeline,
    split: &Split,
    attack_cfg: Option<&AttackConfig>,
    eval_seed: u64,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::config("evaluation split is empty"));
    }
    let start = Instant::now();
    let samples: Vec<SampleOutcome> = (0..split.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (&split.xs[i], split.ys[i]);
            let dseed = defense_seed(eval_seed, i);
            let clean_correct = defense.predict(x, dseed)? == y;
            let mut first_failure = None;
            let robust_correct = match attack_cfg {
                None => clean_correct,
                Some(_) if !clean_correct => false,
                Some(cfg) => {
                    let res = attack::attack(surrogate, x, y, cfg, i as u64)?;
                    for (r, outcome) in res.restarts.iter().enumerate() {
                        if defense.predict(&outcome.x_adv, dseed)? != y {
                            first_failure = Some(r);
                            break;
                        }
                    }
                    first_failure.is_none()
                }
            };
            Ok(SampleOutcome {
                clean_correct,
                robust_correct,
                first_failure,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = samples.len();
    let frac = |f: fn(&SampleOutcome) -> bool| samples.iter().filter(|s| f(s)).count() as f64 / n as f64;
    Ok(EvalReport {
        n,
        clean_accuracy: frac(|s| s.clean_correct),
        robust_accuracy: frac(|s| s.robust_correct),
        seconds_per_sample: start.elapsed().as_secs_f64() / n as f64,
        samples,
    })
}

impl EvalReport {
    /// Robust accuracy had only the first `restarts` restarts been run.
    pub fn robust_accuracy_at(&self, restarts: usize) -> f64 {
        let ok = self
            .samples
            .iter()
            .filter(|s| s.clean_correct && s.first_failure.is_none_or(|r| r >= restarts))
            .count();
        ok as f64 / self.n as f64
    }
}
