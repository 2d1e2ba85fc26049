//! Properties of the trained default model.

use std::sync::OnceLock;

use clbp::analysis::{diagnostics, trajectory_q};
use clbp::attack::{self, attack_loss, AttackConfig};
use clbp::closed_loop::fixed_point;
use clbp::cli::commands;
use clbp::cli::config::RunConfig;
use clbp::data::SyntheticTask;
use clbp::eval;
use clbp::model::ClbpModel;
use clbp::pipeline::{AnchorOnly, ClbpPipeline, Pipeline};
use clbp::tensor::{Tape, Tensor};

struct Trained {
    cfg: RunConfig,
    task: SyntheticTask,
    model: ClbpModel,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let cfg = RunConfig::default();
        let task = commands::build_task(&cfg).unwrap();
        let model = commands::train_model(&cfg, &task).unwrap().model;
        Trained { cfg, task, model }
    })
}

#[test]
fn second_round_moves_less_than_the_first() {
    let t = trained();
    for x in &t.task.test.take(100).xs {
        let fp = fixed_point(&t.model, x, 50, 1e-10).unwrap();
        let q = trajectory_q(&fp).unwrap();
        let first = fp.zs[1].distance(&fp.zs[0]);
        let second = fp.zs[2].distance(&fp.zs[1]);
        // q is a maximum over ratios that include this one, so equality is
        // possible up to rounding.
        assert!(second <= q * first * (1.0 + 1e-12), "{second:e} > {q:e} * {first:e}");
    }
}

#[test]
fn strongly_contractive_trajectories_converge_fast() {
    let t = trained();
    let mut checked = 0;
    let mut monotone = 0;
    let xs = t.task.test.take(100).xs;
    for x in &xs {
        let fp = fixed_point(&t.model, x, 50, 1e-10).unwrap();
        let q = trajectory_q(&fp).unwrap_or(0.0);
        assert!(fp.converged);
        if q < 1e-2 {
            checked += 1;
            assert!(fp.iterations <= 5, "q {q:e}: {} iterations", fp.iterations);
        }
        if fp.residuals.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    eprintln!("{checked} trajectories with q < 1e-2; {monotone}/{} residual sequences non-increasing", xs.len());
    assert_eq!(monotone, xs.len());
}

/// Mean attack objective at `x` over fresh view seeds.
fn expected_loss(p: &dyn Pipeline, x: &Tensor, y: usize, cfg: &AttackConfig) -> f64 {
    (0..8u64)
        .map(|s| {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let l = p.logits_on(&tape, xv, 0xfeed_0000 + s).unwrap();
            tape.item(attack_loss(&tape, l, y, cfg.loss_kind).unwrap())
        })
        .sum::<f64>()
        / 8.0
}

#[test]
fn averaging_gradients_tightens_the_attack() {
    let t = trained();
    let mut agg = t.cfg.aggregation.clone();
    agg.num_views = 8;
    agg.top_k = agg.top_k.min(8);
    let p = ClbpPipeline::new(&t.model, t.cfg.loop_cfg.clone(), agg);
    let split = t.task.test.take(200);
    let base = AttackConfig {
        num_steps: 10,
        ..t.cfg.attack.clone()
    };
    let eot = AttackConfig { eot_samples: 4, ..base.clone() };
    let mut wins = 0;
    for (i, (x, &y)) in split.xs.iter().zip(&split.ys).enumerate() {
        let one = attack::eot_pgd(&p, x, y, &base, i as u64).unwrap().x_adv;
        let four = attack::eot_pgd(&p, x, y, &eot, i as u64).unwrap().x_adv;
        if expected_loss(&p, &four, y, &base) >= expected_loss(&p, &one, y, &base) {
            wins += 1;
        }
    }
    eprintln!("eot=4 at least as strong on {wins}/200");
    assert!(wins >= 120);
}

#[test]
fn clbp_moves_less_under_attack() {
    let t = trained();
    let split = t.task.test.take(100);
    let baseline = AnchorOnly::new(&t.model);
    let clbp = ClbpPipeline::new(&t.model, t.cfg.loop_cfg.clone(), t.cfg.aggregation.clone());
    let (records, s) = diagnostics(&baseline, &clbp, &split, &t.cfg.attack, t.cfg.eval_seed).unwrap();
    assert!(s.median_delta_clbp < s.median_delta_baseline);
    for r in &records {
        for d in [&r.baseline, &r.clbp] {
            assert_eq!(d.clean_margin > 0.0, d.clean_correct);
        }
    }
}

#[test]
fn two_well_separated_classes_are_easy() {
    let mut cfg = RunConfig::default();
    cfg.task.num_classes = 2;
    cfg.model.num_classes = 2;
    cfg.task.separation = 12.0;
    cfg.task.n_train = 200;
    cfg.task.n_test = 200;
    cfg.train.epochs = 1;
    let task = commands::build_task(&cfg).unwrap();
    let model = commands::train_model(&cfg, &task).unwrap().model;
    let anchor = AnchorOnly::new(&model);
    let report = eval::evaluate(&anchor, &anchor, &task.test, None, cfg.eval_seed).unwrap();
    assert!(report.clean_accuracy >= 0.95, "{}", report.clean_accuracy);
}
