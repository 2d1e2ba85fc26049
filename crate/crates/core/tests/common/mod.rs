//! Helpers shared by the integration tests.
#![allow(dead_code)]

use clbp::attack::{loss_and_gradient, LossKind};
use clbp::closed_loop::LoopConfig;
use clbp::aggregate::AggregationConfig;
use clbp::model::{ClbpModel, ModelConfig};
use clbp::pipeline::{ClbpPipeline, Pipeline};
use clbp::tensor::gradcheck::{numerical_gradient, relative_error, STEP};
use clbp::tensor::{Tape, Tensor, TensorResult, Var};
use clbp::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tolerated relative error between analytic and central-difference gradients.
pub const GRAD_TOL: f64 = 1e-4;

type Build = fn(&Tape, &[Var]) -> TensorResult<Var>;
type Valid = fn(&[Tensor]) -> bool;

/// One differentiable primitive with the shapes of its inputs. Inputs are
/// resampled until `valid` holds, which keeps them away from kinks.
pub struct Case {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub build: Build,
    pub valid: Valid,
}

fn any(_: &[Tensor]) -> bool {
    true
}

fn away_from(values: &[f64], kinks: &[f64]) -> bool {
    values.iter().all(|v| kinks.iter().all(|k| (v - k).abs() > 0.02))
}

fn away_from_zero(x: &[Tensor]) -> bool {
    away_from(x[0].data(), &[0.0])
}

fn away_from_clamp(x: &[Tensor]) -> bool {
    away_from(x[0].data(), &[-0.5, 0.5])
}

fn clear_rival(x: &[Tensor]) -> bool {
    let mut rivals: Vec<f64> = x[0].data().iter().enumerate().filter(|&(i, _)| i != 1).map(|(_, &v)| v).collect();
    rivals.sort_by(|a, b| b.total_cmp(a));
    rivals[0] - rivals[1] > 0.02
}

fn away_from_box(x: &[Tensor]) -> bool {
    let d: Vec<f64> = x[0].data().iter().zip(x[1].data()).map(|(a, b)| a - b).collect();
    away_from(&d, &[-0.3, 0.3])
}

pub fn cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", shapes: &[&[3, 4], &[4, 2]], build: |t, v| t.matmul(v[0], v[1]), valid: any },
        Case { name: "matmul_vec_mat", shapes: &[&[4], &[4, 3]], build: |t, v| t.matmul(v[0], v[1]), valid: any },
        Case { name: "matmul_mat_vec", shapes: &[&[3, 4], &[4]], build: |t, v| t.matmul(v[0], v[1]), valid: any },
        Case { name: "transpose", shapes: &[&[3, 2]], build: |t, v| t.transpose(v[0]), valid: any },
        Case { name: "add", shapes: &[&[2, 3], &[2, 3]], build: |t, v| t.add(v[0], v[1]), valid: any },
        Case { name: "sub", shapes: &[&[2, 3], &[2, 3]], build: |t, v| t.sub(v[0], v[1]), valid: any },
        Case { name: "mul", shapes: &[&[2, 3], &[2, 3]], build: |t, v| t.mul(v[0], v[1]), valid: any },
        Case { name: "add_row", shapes: &[&[3, 4], &[4]], build: |t, v| t.add_row(v[0], v[1]), valid: any },
        Case { name: "scale", shapes: &[&[5]], build: |t, v| Ok(t.scale(v[0], -1.7)), valid: any },
        Case { name: "shift", shapes: &[&[5]], build: |t, v| Ok(t.shift(v[0], 0.4)), valid: any },
        Case { name: "tanh", shapes: &[&[2, 3]], build: |t, v| Ok(t.tanh(v[0])), valid: any },
        Case { name: "relu", shapes: &[&[6]], build: |t, v| Ok(t.relu(v[0])), valid: away_from_zero },
        Case { name: "hinge", shapes: &[&[6]], build: |t, v| Ok(t.hinge(v[0])), valid: away_from_zero },
        Case { name: "clamp", shapes: &[&[6]], build: |t, v| t.clamp(v[0], -0.5, 0.5), valid: away_from_clamp },
        Case { name: "sum", shapes: &[&[2, 3]], build: |t, v| Ok(t.sum(v[0])), valid: any },
        Case { name: "mean_axis0", shapes: &[&[3, 4]], build: |t, v| t.mean_axis(v[0], 0), valid: any },
        Case { name: "mean_axis1", shapes: &[&[3, 4]], build: |t, v| t.mean_axis(v[0], 1), valid: any },
        Case { name: "sum_axis0", shapes: &[&[3, 4]], build: |t, v| t.sum_axis(v[0], 0), valid: any },
        Case { name: "sum_axis1", shapes: &[&[3, 4]], build: |t, v| t.sum_axis(v[0], 1), valid: any },
        Case { name: "concat_rows", shapes: &[&[2, 3], &[1, 3]], build: |t, v| t.concat(&[v[0], v[1]], 0), valid: any },
        Case { name: "concat_cols", shapes: &[&[2, 3], &[2, 2]], build: |t, v| t.concat(&[v[0], v[1]], 1), valid: any },
        Case { name: "stack", shapes: &[&[3], &[3], &[3]], build: |t, v| t.stack(&[v[0], v[1], v[2]]), valid: any },
        Case { name: "reshape", shapes: &[&[2, 3]], build: |t, v| t.reshape(v[0], &[3, 2]), valid: any },
        Case { name: "gather", shapes: &[&[6]], build: |t, v| t.gather(v[0], &[0, 3, 3, 5]), valid: any },
        Case { name: "slice_rows", shapes: &[&[4, 3]], build: |t, v| t.slice_rows(v[0], 1, 3), valid: any },
        Case { name: "l2_normalize_vec", shapes: &[&[5]], build: |t, v| t.l2_normalize(v[0]), valid: any },
        Case { name: "l2_normalize_rows", shapes: &[&[3, 4]], build: |t, v| t.l2_normalize(v[0]), valid: any },
        Case { name: "softmax_t", shapes: &[&[5]], build: |t, v| t.softmax_t(v[0], 2.0), valid: any },
        Case { name: "log_softmax_t", shapes: &[&[5]], build: |t, v| t.log_softmax_t(v[0], 0.5), valid: any },
        Case { name: "cross_entropy", shapes: &[&[4]], build: |t, v| t.cross_entropy(v[0], 2), valid: any },
        Case { name: "kl_div", shapes: &[&[4], &[4]], build: |t, v| t.kl_div(v[0], v[1], 2.0), valid: any },
        Case { name: "competitor_margin", shapes: &[&[4]], build: |t, v| t.competitor_margin(v[0], 1), valid: clear_rival },
        Case { name: "project_linf", shapes: &[&[6], &[6]], build: |t, v| t.project_linf(v[0], v[1], 0.3), valid: away_from_box },
    ]
}

fn sample_inputs(case: &Case, r: &mut ChaCha8Rng) -> Vec<Tensor> {
    loop {
        let xs: Vec<Tensor> = case.shapes.iter().map(|s| Tensor::randn(s, 1.0, r)).collect();
        if (case.valid)(&xs) {
            return xs;
        }
    }
}

/// Scalarises `out` as `sum(out * probe)` so every output entry matters.
fn scalarise(t: &Tape, out: Var, probe: &Tensor) -> Var {
    let p = t.constant(probe.clone());
    t.sum(t.mul(out, p).expect("probe shape"))
}

/// Largest relative error over the inputs of one seeded trial.
pub fn check_case(case: &Case, seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = sample_inputs(case, &mut r);
    let out_shape = {
        let t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        t.shape((case.build)(&t, &vars).expect("forward")).to_vec()
    };
    let probe = Tensor::randn(&out_shape, 1.0, &mut r);
    let t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
    let loss = scalarise(&t, (case.build)(&t, &vars).expect("forward"), &probe);
    let grads = t.backward(loss).expect("backward");
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let f = |xi: &Tensor| {
            let t = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| t.constant(if j == i { xi.clone() } else { x.clone() }))
                .collect();
            t.item(scalarise(&t, (case.build)(&t, &vars).expect("forward"), &probe))
        };
        let numeric = numerical_gradient(f, &inputs[i], STEP);
        worst = worst.max(relative_error(&grads.wrt(vars[i]), &numeric, 1e-8));
    }
    worst
}

/// The default model with every trainable tensor nudged off its
/// initialisation, so the loop actually moves.
pub fn active_model(seed: u64) -> ClbpModel {
    let mut m = ClbpModel::new(ModelConfig {
        rng_seed: seed,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for t in m.trainable_mut() {
        for v in t.data_mut() {
            *v += 0.1 * r.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    m
}

pub fn small_pipeline(model: &ClbpModel, views: usize) -> ClbpPipeline<'_> {
    ClbpPipeline::new(
        model,
        LoopConfig::default(),
        AggregationConfig {
            num_views: views,
            top_k: views.min(4),
            ..AggregationConfig::default()
        },
    )
}

pub fn random_input(dim: usize, r: &mut impl Rng) -> Tensor {
    Tensor::randn(&[dim], 1.0, r)
}

/// `logits = W x + b`, for attacks with closed-form answers.
pub struct LinearPipeline {
    pub w: Tensor,
    pub b: Tensor,
}

impl Pipeline for LinearPipeline {
    fn num_classes(&self) -> usize {
        self.w.rows()
    }

    fn is_stochastic(&self) -> bool {
        false
    }

    fn logits_on(&self, tape: &Tape, x: Var, _view_seed: u64) -> Result<Var> {
        let w = tape.constant(self.w.clone());
        let b = tape.constant(self.b.clone());
        Ok(tape.add(tape.matmul(w, x)?, b)?)
    }

    fn features(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = x.norm_l2();
        Ok((x.map(|v| v / n), self.w.clone()))
    }
}

fn runner_up(l: &[f64]) -> usize {
    let top = clbp::tensor::argmax(l);
    (0..l.len()).filter(|&c| c != top).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap()
}

/// Worst relative error of the input gradient of the pipeline loss (N = 1,
/// V = 4, view seed fixed per trial) against central differences.
pub fn pipeline_gradient_error(trials: u64) -> f64 {
    let model = active_model(3);
    let p = small_pipeline(&model, 4);
    let mut r = rng(9);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let x = Tensor::randn(&[64], 1.2, &mut r);
        // The runner-up class keeps the loss away from saturation, where
        // differences drown in rounding.
        let y = runner_up(p.logits(&x, trial).unwrap().data());
        let (_, g) = loss_and_gradient(&p, &x, y, LossKind::CrossEntropy, trial).unwrap();
        let f = |xi: &Tensor| {
            let t = Tape::new();
            let xv = t.constant(xi.clone());
            let l = p.logits_on(&t, xv, trial).unwrap();
            t.item(t.cross_entropy(l, y).unwrap())
        };
        let numeric = numerical_gradient(f, &x, STEP);
        worst = worst.max(relative_error(&g, &numeric, 1e-8));
    }
    worst
}
