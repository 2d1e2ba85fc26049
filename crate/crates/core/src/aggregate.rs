//! Multi-view generation and similarity-weighted logit aggregation.
//!
//! For per-view embeddings `z_v` and logits `l_v`:
//!
//! ```text
//! S_ij = <z_i, z_j>,  sc_i = (1/K) sum_{j in N_i} S_ij,  a = softmax(sc / tau),  l_agg = sum_v a_v l_v
//! ```
//!
//! `N_i` is the top-K of row `i` of `S`. The index sets are chosen on values
//! and held fixed while differentiating, so gradients reach the logits and,
//! through `S`, the embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorResult, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    pub num_views: usize,
    pub top_k: usize,
    pub temperature: f64,
    /// Leave `S_ii` out of each neighbour set.
    pub exclude_self: bool,
    pub noise_std: f64,
    /// Probability of zeroing each coordinate.
    pub dropout: f64,
    /// Rotation angles are uniform in `[-max_angle, max_angle]` radians.
    pub max_angle: f64,
    pub rng_seed: u64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            num_views: 32,
            top_k: 4,
            temperature: 0.1,
            exclude_self: false,
            noise_std: 0.1,
            dropout: 0.05,
            max_angle: 0.1,
            rng_seed: 0,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_views == 0 {
            return Err(Error::config("aggregate.num_views must be at least 1"));
        }
        let available = if self.exclude_self {
            self.num_views - 1
        } else {
            self.num_views
        };
        if self.top_k == 0 || self.top_k > available {
            return Err(Error::config(format!(
                "aggregate.top_k = {} needs 1 <= K <= {available}",
                self.top_k
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("aggregate.temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.noise_std < 0.0 || self.max_angle < 0.0 {
            return Err(Error::config("aggregate augmentation parameters out of range"));
        }
        Ok(())
    }
}

/// One view's transform: `x -> rotate(x * keep) + noise`, where the rotation
/// acts in a single coordinate plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub keep: Vec<bool>,
    pub plane: (usize, usize),
    pub angle: f64,
    pub noise: Vec<f64>,
}

impl Augmentation {
    pub fn identity(dim: usize) -> Self {
        Self {
            keep: vec![true; dim],
            plane: (0, 0),
            angle: 0.0,
            noise: vec![0.0; dim],
        }
    }

    pub fn sample<R: Rng + ?Sized>(dim: usize, cfg: &AggregationConfig, rng: &mut R) -> Self {
        let keep = (0..dim).map(|_| rng.random::<f64>() >= cfg.dropout).collect();
        let i = rng.random_range(0..dim);
        let j = if dim > 1 {
            (i + rng.random_range(1..dim)) % dim
        } else {
            i
        };
        let angle = if dim > 1 && cfg.max_angle > 0.0 {
            rng.random_range(-cfg.max_angle..=cfg.max_angle)
        } else {
            0.0
        };
        let noise = (0..dim)
            .map(|_| cfg.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            keep,
            plane: (i, j),
            angle,
            noise,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.angle == 0.0 && self.keep.iter().all(|&k| k) && self.noise.iter().all(|&n| n == 0.0)
    }

    /// The linear part as a `[dim, dim]` matrix acting on row vectors.
    pub fn matrix(&self) -> Tensor {
        let n = self.keep.len();
        let mut a = vec![0.0; n * n];
        for (r, &k) in self.keep.iter().enumerate() {
            if k {
                a[r * n + r] = 1.0;
            }
        }
        let (i, j) = self.plane;
        if i != j && self.angle != 0.0 {
            let (s, c) = self.angle.sin_cos();
            let ki = if self.keep[i] { 1.0 } else { 0.0 };
            let kj = if self.keep[j] { 1.0 } else { 0.0 };
            // out_i = c*x_i - s*x_j, out_j = s*x_i + c*x_j on the kept input.
            a[i * n + i] = c * ki;
            a[j * n + i] = -s * kj;
            a[i * n + j] = s * ki;
            a[j * n + j] = c * kj;
        }
        Tensor::matrix(n, n, a).expect("square")
    }

    /// Applies the view transform on a tape.
    pub fn apply_on(&self, tape: &Tape, x: Var) -> TensorResult<Var> {
        if self.is_identity() {
            return Ok(x);
        }
        let a = tape.constant(self.matrix());
        let moved = tape.matmul(x, a)?;
        let noise = tape.constant(Tensor::vector(self.noise.clone()));
        tape.add(moved, noise)
    }

    pub fn apply(&self, x: &Tensor) -> TensorResult<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.apply_on(&tape, xv)?;
        Ok(tape.value(out))
    }
}

/// Augmentations for `V` views; the first is always the identity.
pub fn sample_augmentations(dim: usize, cfg: &AggregationConfig, seed: u64) -> Vec<Augmentation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.num_views);
    out.push(Augmentation::identity(dim));
    for _ in 1..cfg.num_views {
        out.push(Augmentation::sample(dim, cfg, &mut rng));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSet {
    pub views: Vec<Tensor>,
    pub augmentations: Vec<Augmentation>,
}

pub fn generate_views(x: &Tensor, cfg: &AggregationConfig, seed: u64) -> Result<ViewSet> {
    let augmentations = sample_augmentations(x.len(), cfg, seed);
    let views = augmentations
        .iter()
        .map(|a| a.apply(x))
        .collect::<TensorResult<Vec<_>>>()?;
    Ok(ViewSet {
        views,
        augmentations,
    })
}

/// Constant neighbour mask: `1/K` on the K largest entries of each row
/// (lowest index wins ties), zero elsewhere.
pub fn topk_mask(similarity: &Tensor, k: usize, exclude_self: bool) -> Tensor {
    let n = similarity.rows();
    let mut mask = vec![0.0; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let row = similarity.row(i);
        order.clear();
        order.extend((0..n).filter(|&j| !(exclude_self && j == i)));
        // Stable sort keeps lower indices first among equal values.
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        for &j in order.iter().take(k) {
            mask[i * n + j] = 1.0 / k as f64;
        }
    }
    Tensor::matrix(n, n, mask).expect("square")
}

#[derive(Debug, Clone, Copy)]
pub struct AggregationVars {
    pub weights: Var,
    pub scores: Var,
    pub similarity: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationOutput {
    pub weights: Tensor,
    pub scores: Tensor,
    pub similarity: Tensor,
    pub logits: Tensor,
}

/// Aggregates `(logits_v, z_v)` pairs on a tape.
pub fn aggregate_on(
    tape: &Tape,
    per_view: &[(Var, Var)],
    cfg: &AggregationConfig,
) -> Result<AggregationVars> {
    if per_view.len() != cfg.num_views {
        return Err(Error::config(format!(
            "aggregate got {} views, config says {}",
            per_view.len(),
            cfg.num_views
        )));
    }
    cfg.validate()?;
    let logits: Vec<Var> = per_view.iter().map(|p| p.0).collect();
    let zs: Vec<Var> = per_view.iter().map(|p| p.1).collect();
    let z = tape.stack(&zs)?;
    let l = tape.stack(&logits)?;
    let similarity = tape.matmul(z, tape.transpose(z)?)?;
    let mask = tape.constant(topk_mask(
        &tape.value(similarity),
        cfg.top_k,
        cfg.exclude_self,
    ));
    let scores = tape.sum_axis(tape.mul(similarity, mask)?, 1)?;
    let weights = tape.softmax_t(scores, cfg.temperature)?;
    let agg = tape.matmul(weights, l)?;
    Ok(AggregationVars {
        weights,
        scores,
        similarity,
        logits: agg,
    })
}

/// Value-level aggregation.
pub fn aggregate(per_view: &[(Tensor, Tensor)], cfg: &AggregationConfig) -> Result<AggregationOutput> {
    let tape = Tape::new();
    let vars: Vec<(Var, Var)> = per_view
        .iter()
        .map(|(l, z)| (tape.constant(l.clone()), tape.constant(z.clone())))
        .collect();
    let out = aggregate_on(&tape, &vars, cfg)?;
    Ok(AggregationOutput {
        weights: tape.value(out.weights),
        scores: tape.value(out.scores),
        similarity: tape.value(out.similarity),
        logits: tape.value(out.logits),
    })
}

/// Upper bound on the total weight of `V - M` outlier views whose scores are
/// at most `b` when the `M` consistent views score at least `a`.
pub fn outlier_weight_bound(v: usize, m: usize, a: f64, b: f64, tau: f64) -> f64 {
    let outliers = (v - m) as f64;
    // Scaled by exp(-(a - b) / tau) so large gaps underflow instead of overflowing.
    let decay = (-(a - b) / tau).exp();
    outliers * decay / (m as f64 + outliers * decay)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Tensor {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::vector(v.into_iter().map(|x| x / n).collect())
    }

    #[test]
    fn single_view_passes_through() {
        let cfg = AggregationConfig {
            num_views: 1,
            top_k: 1,
            ..Default::default()
        };
        let l = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let out = aggregate(&[(l.clone(), unit(vec![1.0, 2.0]))], &cfg).unwrap();
        assert_eq!(out.weights.data(), &[1.0]);
        assert_eq!(out.logits, l);
    }

    #[test]
    fn identical_views_weigh_uniformly() {
        let cfg = AggregationConfig {
            num_views: 4,
            top_k: 2,
            ..Default::default()
        };
        let z = unit(vec![0.3, -0.4, 0.5]);
        let per_view: Vec<_> = (0..4)
            .map(|i| (Tensor::vector(vec![i as f64, 1.0]), z.clone()))
            .collect();
        let out = aggregate(&per_view, &cfg).unwrap();
        for w in out.weights.data() {
            assert!((w - 0.25).abs() < 1e-12);
        }
        assert!((out.logits.data()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn k_larger_than_v_is_a_config_error() {
        let cfg = AggregationConfig {
            num_views: 3,
            top_k: 4,
            ..Default::default()
        };
        let z = unit(vec![1.0, 0.0]);
        let per_view = vec![(Tensor::vector(vec![0.0]), z); 3];
        assert!(matches!(aggregate(&per_view, &cfg), Err(Error::Config(_))));
        let cfg = AggregationConfig {
            num_views: 3,
            top_k: 3,
            exclude_self: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn topk_ties_go_to_lowest_index() {
        let s = Tensor::matrix(3, 3, vec![1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0]).unwrap();
        let m = topk_mask(&s, 2, false);
        assert_eq!(m.row(2), &[0.5, 0.0, 0.5]);
        let ex = topk_mask(&s, 1, true);
        assert_eq!(ex.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(ex.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn worked_outlier_bound() {
        let direct = 4.0 / (28.0 * 6f64.exp() + 4.0);
        let b = outlier_weight_bound(32, 28, 0.9, 0.3, 0.1);
        assert!((b - direct).abs() < 1e-15);
        assert!((b - 3.54e-4).abs() < 5e-7);
    }

    #[test]
    fn views_are_deterministic_and_view_zero_is_identity() {
        let x = Tensor::vector((0..16).map(|i| i as f64 * 0.1).collect());
        let cfg = AggregationConfig {
            num_views: 8,
            ..Default::default()
        };
        let a = generate_views(&x, &cfg, 3).unwrap();
        let b = generate_views(&x, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.views[0], x);
        for i in 0..8 {
            for j in i + 1..8 {
                assert!(a.views[i].distance(&a.views[j]) > 0.0, "views {i} and {j}");
            }
        }
        let one = generate_views(
            &x,
            &AggregationConfig {
                num_views: 1,
                top_k: 1,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        assert_eq!(one.views, vec![x]);
    }
}
