//! The work behind each subcommand, as plain functions over a [`RunConfig`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::aggregate::outlier_weight_bound;
use crate::analysis::{
    self, ConvergenceReport, DepthRow, DiagnosticsRecord, DiagnosticsSummary, LayerCka, LemmaReport,
    LipschitzReport, MarginCounterexample, OutlierReport, StabilityReport,
};
use crate::attack;
use crate::closed_loop::{fixed_point, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL};
use crate::data::{self, Split, SyntheticTask};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::model::ClbpModel;
use crate::pipeline::{AnchorOnly, ClbpPipeline};
use crate::tensor::Tensor;
use crate::train::{self, StepRecord, TrainState};

pub fn build_task(cfg: &RunConfig) -> Result<SyntheticTask> {
    data::make_gaussian_task(&cfg.task)
}

/// The untrained model with class tokens fitted to the training split.
pub fn grounded_model(cfg: &RunConfig, task: &SyntheticTask) -> Result<ClbpModel> {
    let mut model = ClbpModel::new(cfg.model.clone())?;
    model.ground_class_tokens(&task.train.xs, &task.train.ys, &cfg.grounding)?;
    Ok(model)
}

pub struct Trained {
    pub grounded: ClbpModel,
    pub model: ClbpModel,
    pub state: TrainState,
}

pub fn train_model(cfg: &RunConfig, task: &SyntheticTask) -> Result<Trained> {
    cfg.validate()?;
    let grounded = grounded_model(cfg, task)?;
    let mut model = grounded.clone();
    let state = train::train(&mut model, &task.train, &cfg.loop_cfg, &cfg.aggregation, &cfg.train)?;
    Ok(Trained {
        grounded,
        model,
        state,
    })
}

/// The evaluation split: the test set, truncated to `eval_samples`.
pub fn eval_split(cfg: &RunConfig, task: &SyntheticTask) -> Split {
    match cfg.eval_samples {
        Some(n) => task.test.take(n),
        None => task.test.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub baseline: EvalReport,
    pub clbp: EvalReport,
}

/// The anchor-only baseline and the CLBP pipeline, each attacked white-box.
pub fn evaluate_models(cfg: &RunConfig, model: &ClbpModel, split: &Split) -> Result<EvalSummary> {
    let baseline = AnchorOnly::new(model);
    let clbp = ClbpPipeline::new(model, cfg.loop_cfg.clone(), cfg.aggregation.clone());
    Ok(EvalSummary {
        config_hash: cfg.hash(),
        baseline: eval::evaluate(&baseline, &baseline, split, Some(&cfg.attack), cfg.eval_seed)?,
        clbp: eval::evaluate(&clbp, &clbp, split, Some(&cfg.attack), cfg.eval_seed)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Views,
    Depth,
    Restarts,
    Eot,
    Epsilon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_hash: String,
    pub axis: SweepAxis,
    pub value: f64,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub seconds_per_sample: f64,
}

fn as_count(v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::config(format!("sweep value {v} is not a count")))
    }
}

/// CLBP accuracy as one setting varies, the model fixed. The epsilon axis
/// keeps the configured `step_size / epsilon` ratio. Restarts are nested, so
/// that axis runs once at the largest count and reads off prefixes; its
/// rows share that run's timing.
pub fn sweep(cfg: &RunConfig, model: &ClbpModel, split: &Split, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let run = |c: &RunConfig| -> Result<EvalReport> {
        c.validate()?;
        let p = ClbpPipeline::new(model, c.loop_cfg.clone(), c.aggregation.clone());
        eval::evaluate(&p, &p, split, Some(&c.attack), c.eval_seed)
    };
    let row = |c: &RunConfig, value: f64, clean: f64, robust: f64, spp: f64| SweepRow {
        config_hash: c.hash(),
        axis,
        value,
        clean_accuracy: clean,
        robust_accuracy: robust,
        seconds_per_sample: spp,
    };
    if axis == SweepAxis::Restarts {
        let counts = values.iter().map(|&v| as_count(v)).collect::<Result<Vec<_>>>()?;
        let mut c = cfg.clone();
        c.attack.num_restarts = *counts.iter().max().expect("non-empty");
        let report = run(&c)?;
        return Ok(counts
            .iter()
            .zip(values)
            .map(|(&n, &v)| {
                let mut ci = cfg.clone();
                ci.attack.num_restarts = n;
                row(&ci, v, report.clean_accuracy, report.robust_accuracy_at(n), report.seconds_per_sample)
            })
            .collect());
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        match axis {
            SweepAxis::Views => {
                c.aggregation.num_views = as_count(v)?;
                c.aggregation.top_k = c.aggregation.top_k.min(c.aggregation.num_views);
            }
            SweepAxis::Depth => c.loop_cfg.depth = as_count(v)?,
            SweepAxis::Eot => c.attack.eot_samples = as_count(v)?,
            SweepAxis::Epsilon => {
                let ratio = cfg.attack.step_size / cfg.attack.epsilon;
                c.attack.epsilon = v;
                c.attack.step_size = v * ratio;
            }
            SweepAxis::Restarts => unreachable!(),
        }
        let r = run(&c)?;
        rows.push(row(&c, v, r.clean_accuracy, r.robust_accuracy, r.seconds_per_sample));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config_hash: String,
    pub checks: Vec<Check>,
    pub margin_lemma: LemmaReport,
    pub margin_counterexample: MarginCounterexample,
    pub outlier_bound: OutlierReport,
    pub outlier_worked_bound: f64,
    pub convergence: ConvergenceReport,
    pub depth: Vec<DepthRow>,
    pub lipschitz_clean: LipschitzReport,
    pub lipschitz_adversarial: LipschitzReport,
    pub stability: StabilityReport,
}

/// White-box adversarial points against the CLBP pipeline.
pub fn adversarial_inputs(cfg: &RunConfig, model: &ClbpModel, split: &Split) -> Result<Vec<Tensor>> {
    let p = ClbpPipeline::new(model, cfg.loop_cfg.clone(), cfg.aggregation.clone());
    (0..split.len())
        .into_par_iter()
        .map(|i| Ok(attack::attack(&p, &split.xs[i], split.ys[i], &cfg.attack, i as u64)?.x_adv))
        .collect()
}

/// Every stability and bound check on a trained model.
pub fn verify(cfg: &RunConfig, model: &ClbpModel, task: &SyntheticTask) -> Result<VerifyReport> {
    let a = &cfg.analysis;
    let margin_lemma = analysis::verify_margin_lemma(a.margin_trials, a.seed);
    let margin_counterexample = analysis::margin_counterexample(1e-3);
    let outlier_bound = analysis::verify_outlier_bound(a.outlier_trials, a.seed);
    let outlier_worked_bound = outlier_weight_bound(32, 28, 0.9, 0.3, 0.1);
    let traj = task.test.take(a.trajectories);
    let convergence = analysis::verify_convergence(model, &traj.xs, a.tol_margin, a.max_k)?;
    let depth = analysis::depth_profile(model, &traj, a.depth_k)?;
    let lip = task.test.take(a.lipschitz_samples);
    let lipschitz_clean = analysis::estimate_lipschitz(model, &lip.xs, "clean")?;
    let advs = adversarial_inputs(cfg, model, &lip)?;
    let lipschitz_adversarial = analysis::estimate_lipschitz(model, &advs, "adversarial")?;
    let stab = task.test.take(a.stability_samples);
    let stability = analysis::verify_stability(model, &stab.xs, &cfg.stability)?;

    let mut checks = Vec::new();
    let mut check = |name: &str, passed: bool, detail: String| {
        checks.push(Check {
            name: name.into(),
            passed,
            detail,
        })
    };
    check(
        "margin_lemma",
        margin_lemma.all_passed() && margin_counterexample.flipped(),
        format!(
            "{}/{} preserved; counterexample flips: {}",
            margin_lemma.passed,
            margin_lemma.trials,
            margin_counterexample.flipped()
        ),
    );
    check(
        "outlier_bound",
        outlier_bound.passed == outlier_bound.trials,
        format!(
            "{}/{} within bound; worked instance {:.3e}",
            outlier_bound.passed, outlier_bound.trials, outlier_worked_bound
        ),
    );
    let plateau = depth.len() > 2 && depth[1].mean_distance < depth[0].mean_distance && depth[1].accuracy == depth[2].accuracy;
    check(
        "convergence",
        convergence.pass_fraction >= 0.99 && plateau,
        format!(
            "{}/{} contractive trajectories inside the envelope; d1 < d0 and acc(k=1) == acc(k=2): {plateau}",
            convergence.passed, convergence.contractive
        ),
    );
    check(
        "stability",
        stability.pass_fraction >= 0.95,
        format!("{:.1}% of samples within the bound", 100.0 * stability.pass_fraction),
    );
    for rep in [&lipschitz_clean, &lipschitz_adversarial] {
        check(
            &format!("contraction_{}", rep.mode),
            rep.fraction_q_below_one == 1.0 && rep.mean_q < rep.mean_q_gh,
            format!(
                "mean q {:.3e} vs mean L_G*L_H {:.3e}; {:.1}% of {} pairs below 1",
                rep.mean_q,
                rep.mean_q_gh,
                100.0 * rep.fraction_q_below_one,
                rep.pairs.len()
            ),
        );
    }
    Ok(VerifyReport {
        config_hash: cfg.hash(),
        checks,
        margin_lemma,
        margin_counterexample,
        outlier_bound,
        outlier_worked_bound,
        convergence,
        depth,
        lipschitz_clean,
        lipschitz_adversarial,
        stability,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub config_hash: String,
    pub sample: usize,
    pub k: usize,
    pub distance_to_fixed_point: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutput {
    pub config_hash: String,
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub summary: DiagnosticsSummary,
    pub cka: Vec<LayerCka>,
    pub trajectories: Vec<TrajectoryRow>,
}

/// Baseline-versus-CLBP diagnostics, CKA drift from the grounded model, and
/// fixed-point trajectories.
pub fn analyze(cfg: &RunConfig, grounded: &ClbpModel, model: &ClbpModel, task: &SyntheticTask) -> Result<AnalysisOutput> {
    let split = task.test.take(cfg.analysis.diagnostics_samples);
    let baseline = AnchorOnly::new(model);
    let clbp = ClbpPipeline::new(model, cfg.loop_cfg.clone(), cfg.aggregation.clone());
    let (diagnostics, summary) = analysis::diagnostics(&baseline, &clbp, &split, &cfg.attack, cfg.eval_seed)?;
    let cka = analysis::layerwise_cka(grounded, model, &split.xs, &cfg.loop_cfg)?;
    let hash = cfg.hash();
    let mut trajectories = Vec::new();
    for (i, x) in split.xs.iter().enumerate() {
        let fp = fixed_point(model, x, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL)?;
        for (k, d) in fp.distances().into_iter().enumerate() {
            trajectories.push(TrajectoryRow {
                config_hash: hash.clone(),
                sample: i,
                k,
                distance_to_fixed_point: d,
            });
        }
    }
    Ok(AnalysisOutput {
        config_hash: hash,
        diagnostics,
        summary,
        cka,
        trajectories,
    })
}

/// Per-step training history with the config hash on each row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub config_hash: String,
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub mar: f64,
    pub kl: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

impl HistoryRow {
    pub fn new(config_hash: &str, r: &StepRecord) -> Self {
        Self {
            config_hash: config_hash.into(),
            step: r.step,
            lr: r.lr,
            ce: r.ce,
            mar: r.mar,
            kl: r.kl,
            total: r.total,
            grad_norm: r.grad_norm,
            clipped_norm: r.clipped_norm,
        }
    }
}

/// One model's diagnostics for one sample, flattened for CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub config_hash: String,
    pub sample: usize,
    pub label: usize,
    pub model: String,
    pub clean_margin: f64,
    pub adv_margin: f64,
    pub clean_correct: bool,
    pub adv_correct: bool,
    pub adv_cos_correct: f64,
    pub adv_cos_competitor: f64,
    pub delta: f64,
}

pub fn diagnostics_rows(config_hash: &str, records: &[DiagnosticsRecord]) -> Vec<DiagnosticsRow> {
    let mut rows = Vec::with_capacity(2 * records.len());
    for r in records {
        for (name, d) in [("baseline", &r.baseline), ("clbp", &r.clbp)] {
            rows.push(DiagnosticsRow {
                config_hash: config_hash.into(),
                sample: r.sample,
                label: r.label,
                model: name.into(),
                clean_margin: d.clean_margin,
                adv_margin: d.adv_margin,
                clean_correct: d.clean_correct,
                adv_correct: d.adv_correct,
                adv_cos_correct: d.adv_cos_correct,
                adv_cos_competitor: d.adv_cos_competitor,
                delta: d.delta,
            });
        }
    }
    rows
}
