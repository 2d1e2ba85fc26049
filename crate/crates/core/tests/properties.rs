mod common;

use clbp::aggregate::{aggregate, AggregationConfig};
use clbp::analysis::{estimate_lipschitz, linear_cka};
use clbp::attack::{self, AttackConfig, LossKind};
use clbp::tensor::{Tape, Tensor};
use common::{rng, LinearPipeline};
use proptest::prelude::*;

fn views(seed: u64, v: usize, d: usize, c: usize) -> Vec<(Tensor, Tensor)> {
    let mut r = rng(seed);
    (0..v)
        .map(|_| {
            let z = Tensor::randn(&[d], 1.0, &mut r);
            let n = z.norm_l2();
            (Tensor::randn(&[c], 3.0, &mut r), z.map(|x| x / n))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-50.0f64..50.0, 1..12), t in 0.05f64..5.0) {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(xs));
        let p = tape.value(tape.softmax_t(a, t).unwrap());
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_weights_are_a_distribution(seed in 0u64..1000, v in 1usize..12, k in 1usize..6) {
        let k = k.min(v);
        let cfg = AggregationConfig { num_views: v, top_k: k, ..AggregationConfig::default() };
        let out = aggregate(&views(seed, v, 6, 3), &cfg).unwrap();
        let w = out.weights.data();
        prop_assert!(w.iter().all(|&a| a >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Aggregated logits lie in the convex hull of the per-view logits.
        let per = views(seed, v, 6, 3);
        for c in 0..3 {
            let lo = per.iter().map(|p| p.0.data()[c]).fold(f64::INFINITY, f64::min);
            let hi = per.iter().map(|p| p.0.data()[c]).fold(f64::NEG_INFINITY, f64::max);
            let a = out.logits.data()[c];
            prop_assert!(a >= lo - 1e-9 && a <= hi + 1e-9);
        }
    }

    #[test]
    fn aggregation_is_permutation_equivariant(seed in 0u64..1000, v in 2usize..10, shift in 1usize..9) {
        let cfg = AggregationConfig { num_views: v, top_k: 3.min(v), ..AggregationConfig::default() };
        let per = views(seed, v, 6, 3);
        let perm: Vec<usize> = (0..v).map(|i| (i + shift) % v).collect();
        let permuted: Vec<(Tensor, Tensor)> = perm.iter().map(|&i| per[i].clone()).collect();
        let a = aggregate(&per, &cfg).unwrap();
        let b = aggregate(&permuted, &cfg).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((b.weights.data()[j] - a.weights.data()[i]).abs() < 1e-12);
        }
        for c in 0..3 {
            prop_assert!((a.logits.data()[c] - b.logits.data()[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn cka_is_symmetric_and_bounded(seed in 0u64..1000, n in 2usize..12, dx in 1usize..6, dy in 1usize..6) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[n, dx], 1.0, &mut r);
        let y = Tensor::randn(&[n, dy], 1.0, &mut r);
        let a = linear_cka(&x, &y).unwrap();
        let b = linear_cka(&y, &x).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn attack_stays_in_budget(seed in 0u64..1000, eps in 0.0f64..0.5, steps in 1usize..6, restarts in 1usize..3, cw in any::<bool>(), clamp in any::<bool>()) {
        let mut r = rng(seed);
        let p = LinearPipeline { w: Tensor::randn(&[3, 5], 1.0, &mut r), b: Tensor::randn(&[3], 1.0, &mut r) };
        let x = if clamp {
            Tensor::vector((0..5).map(|i| 0.2 * i as f64).collect())
        } else {
            Tensor::randn(&[5], 1.0, &mut r)
        };
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: 0.4,
            num_steps: steps,
            num_restarts: restarts,
            loss_kind: if cw { LossKind::CwMargin } else { LossKind::CrossEntropy },
            clamp_unit: clamp,
            rng_seed: seed,
            ..AttackConfig::default()
        };
        let res = attack::attack(&p, &x, 1, &cfg, 0).unwrap();
        for o in &res.restarts {
            prop_assert!(o.x_adv.zip_map(&x, |a, b| a - b).unwrap().norm_linf() <= eps);
            if clamp {
                prop_assert!(o.x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            prop_assert!(res.loss >= o.loss);
        }
    }
}

#[test]
fn cka_ignores_rotations_of_one_side() {
    let mut r = rng(1);
    let x = Tensor::randn(&[9, 4], 1.0, &mut r);
    let y = Tensor::randn(&[9, 3], 1.0, &mut r);
    // A rotation of the plane of the first two columns.
    let (c, s) = (0.6f64, 0.8f64);
    let rot = Tensor::matrix(3, 3, vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let t = Tape::new();
    let yr = t.value(t.matmul(t.constant(y.clone()), t.constant(rot)).unwrap());
    let a = linear_cka(&x, &y).unwrap();
    let b = linear_cka(&x, &yr).unwrap();
    assert!((a - b).abs() < 1e-9);
    let scaled = y.map(|v| 3.0 * v);
    assert!((linear_cka(&x, &scaled).unwrap() - a).abs() < 1e-12);
    // Shuffling rows breaks the pairing.
    let rows: Vec<Vec<f64>> = (0..9).map(|i| x.row((i + 4) % 9).to_vec()).collect();
    let shuffled = Tensor::from_rows(&rows).unwrap();
    assert!(linear_cka(&x, &shuffled).unwrap() < 1.0 - 1e-6);
    assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn lipschitz_maximum_is_monotone_under_subsetting() {
    let model = common::active_model(2);
    let mut r = rng(3);
    let xs: Vec<Tensor> = (0..12).map(|_| Tensor::randn(&[64], 1.2, &mut r)).collect();
    let full = estimate_lipschitz(&model, &xs, "clean").unwrap();
    let part = estimate_lipschitz(&model, &xs[..5], "clean").unwrap();
    let max = |rep: &clbp::analysis::LipschitzReport| rep.pairs.iter().map(|p| p.q).fold(0.0, f64::max);
    assert!(max(&part) <= max(&full));
    for p in &full.pairs {
        assert!(p.q >= 0.0 && p.l_g >= 0.0 && p.l_h >= 0.0);
        assert!((p.q_gh - p.l_g * p.l_h).abs() <= 1e-12 * p.q_gh.max(1.0));
        // On the same pair the secant constants factor the step ratio exactly.
        assert!((p.l_g * p.l_h_secant - p.q).abs() <= 1e-9 * p.q.max(1e-300) + 1e-15);
    }
}
