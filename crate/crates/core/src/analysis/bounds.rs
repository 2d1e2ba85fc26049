use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregate::outlier_weight_bound;
use crate::tensor::argmax;

/// Outcome of a randomized check of an exact inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub trials: usize,
    pub passed: usize,
    /// Trial indices that violated the claim; rerun with the same seed to
    /// reproduce.
    pub violations: Vec<usize>,
}

impl LemmaReport {
    pub fn all_passed(&self) -> bool {
        self.passed == self.trials
    }
}

fn unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

fn scores(w: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    w.iter().map(|r| r.iter().zip(z).map(|(a, b)| a * b).sum()).collect()
}

/// Random unit prototypes and features with margin at least `gamma` (taken
/// as a random fraction of the actual margin), perturbed by `dz` with
/// `||dz|| <= gamma / 2`; checks that the argmax of the unnormalized
/// perturbed scores is unchanged. A quarter of the trials sit exactly on the
/// norm boundary and a quarter push straight toward the strongest rival.
pub fn verify_margin_lemma(trials: usize, seed: u64) -> LemmaReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    let mut t = 0;
    while t < trials {
        let c = rng.random_range(2..=10);
        let d = rng.random_range(2..=32);
        let w: Vec<Vec<f64>> = (0..c).map(|_| unit_vector(d, &mut rng)).collect();
        let z = unit_vector(d, &mut rng);
        let s = scores(&w, &z);
        let y = argmax(&s);
        let rival = (0..c).filter(|&k| k != y).max_by(|&a, &b| s[a].total_cmp(&s[b])).expect("rival");
        let margin = s[y] - s[rival];
        if margin <= 0.0 {
            continue;
        }
        let gamma = margin * rng.random_range(0.05..=1.0);
        let radius = gamma / 2.0;
        let dz: Vec<f64> = match t % 4 {
            0 => vec![0.0; d],
            1 => unit_vector(d, &mut rng).into_iter().map(|a| a * radius).collect(),
            2 => {
                let toward: Vec<f64> = w[rival].iter().zip(&w[y]).map(|(a, b)| a - b).collect();
                let n = toward.iter().map(|a| a * a).sum::<f64>().sqrt();
                toward.into_iter().map(|a| a * radius / n).collect()
            }
            _ => {
                let r = radius * rng.random::<f64>();
                unit_vector(d, &mut rng).into_iter().map(|a| a * r).collect()
            }
        };
        let moved: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
        if argmax(&scores(&w, &moved)) != y {
            violations.push(t);
        }
        t += 1;
    }
    LemmaReport {
        trials,
        passed: trials - violations.len(),
        violations,
    }
}

/// A perturbation just past the lemma's radius that flips the prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginCounterexample {
    pub prototypes: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    pub dz: Vec<f64>,
    pub gamma: f64,
    pub dz_norm: f64,
    pub label_before: usize,
    pub label_after: usize,
}

impl MarginCounterexample {
    pub fn flipped(&self) -> bool {
        self.label_before != self.label_after
    }
}

/// Antipodal prototypes in the plane with `z = w_0`, so the margin is
/// exactly 2; `dz = (gamma/2 + h) (w_1 - w_0) / ||w_1 - w_0||`.
pub fn margin_counterexample(h: f64) -> MarginCounterexample {
    let w = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
    let z = vec![1.0, 0.0];
    let gamma = 2.0;
    let scale = gamma / 2.0 + h;
    let dz = vec![-scale, 0.0];
    let moved: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
    MarginCounterexample {
        label_before: argmax(&scores(&w, &z)),
        label_after: argmax(&scores(&w, &moved)),
        dz_norm: scale,
        prototypes: w,
        z,
        dz,
        gamma,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub trials: usize,
    pub passed: usize,
    pub violations: Vec<usize>,
    /// Largest `outlier mass / bound` seen.
    pub worst_ratio: f64,
}

/// Outlier weight mass under the similarity softmax for scores `sc` where
/// the last `v - m` entries are outliers.
fn outlier_mass(sc: &[f64], m: usize, tau: f64) -> f64 {
    let top = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = sc.iter().map(|s| ((s - top) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    e[m..].iter().sum::<f64>() / total
}

/// Random `(V, M, a, b, tau)` with consistent scores in `[a, 1]` and outlier
/// scores in `[-1, b]`; checks the outlier mass against the closed-form bound.
pub fn verify_outlier_bound(trials: usize, seed: u64) -> OutlierReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let v = rng.random_range(2..=64);
        let m = rng.random_range(1..=v);
        let b = rng.random_range(-1.0..0.99);
        let a = rng.random_range(b..=1.0);
        let tau = rng.random_range(0.01..=2.0);
        let sc: Vec<f64> = (0..v)
            .map(|j| if j < m { rng.random_range(a..=1.0) } else { rng.random_range(-1.0..=b) })
            .collect();
        let mass = outlier_mass(&sc, m, tau);
        let bound = outlier_weight_bound(v, m, a, b, tau);
        if mass > bound {
            violations.push(t);
        }
        if bound > 0.0 {
            worst = worst.max(mass / bound);
        }
    }
    OutlierReport {
        trials,
        passed: trials - violations.len(),
        violations,
        worst_ratio: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counterexample_flips_just_past_radius() {
        let c = margin_counterexample(1e-3);
        assert!(c.flipped());
        assert!(c.dz_norm > c.gamma / 2.0);
    }

    #[test]
    fn empty_outlier_set_has_zero_mass() {
        assert_eq!(outlier_mass(&[0.9, 0.95], 2, 0.1), 0.0);
        assert_eq!(outlier_weight_bound(2, 2, 0.9, 0.3, 0.1), 0.0);
    }

    #[test]
    fn bound_tends_to_outlier_share_for_large_tau() {
        let b = outlier_weight_bound(32, 28, 0.9, 0.3, 1e9);
        assert!((b - 4.0 / 32.0).abs() < 1e-9);
    }

    #[test]
    fn small_runs_pass() {
        assert!(verify_margin_lemma(400, 1).all_passed());
        let r = verify_outlier_bound(400, 1);
        assert_eq!(r.passed, r.trials);
        assert!(r.worst_ratio <= 1.0);
    }
}
