use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean, median};
use crate::closed_loop::{apply_h, fixed_point, FixedPoint, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL};
use crate::data::Split;
use crate::error::Result;
use crate::model::ClbpModel;
use crate::seed::{self, tag};
use crate::tensor::{Tape, Tensor};

/// Steps shorter than this are treated as zero when forming ratios: both
/// sides of such a ratio are at rounding level.
pub const MIN_STEP: f64 = 1e-12;

/// Ratios for one consecutive pair `(z_k, z_{k+1})` of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRatios {
    pub sample: usize,
    pub k: usize,
    /// `||T(z_{k+1}) - T(z_k)|| / ||z_{k+1} - z_k||`.
    pub q: f64,
    /// `||G(z_{k+1}) - G(z_k)||_F / ||z_{k+1} - z_k||`.
    pub l_g: f64,
    /// Operator norm of the Jacobian of `H_x` at `G(z_k)`.
    pub l_h: f64,
    /// `||H(W_{k+2}) - H(W_{k+1})|| / ||W_{k+2} - W_{k+1}||_F` on the same pair;
    /// `l_g * l_h_secant` equals `q` identically.
    pub l_h_secant: f64,
    /// `l_g * l_h`.
    pub q_gh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub mode: String,
    pub trajectories: usize,
    pub pairs: Vec<PairRatios>,
    /// Pairs dropped because `||z_{k+1} - z_k|| < MIN_STEP`.
    pub skipped: usize,
    pub mean_q: f64,
    pub median_q: f64,
    pub mean_q_gh: f64,
    pub median_q_gh: f64,
    pub mean_l_g: f64,
    pub mean_l_h: f64,
    pub fraction_q_below_one: f64,
}

/// Largest singular value of `dH_x/dW` at `w`, from the full Jacobian.
pub fn h_operator_norm(model: &ClbpModel, x: &Tensor, w: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false)?;
    let xv = tape.constant(x.clone());
    let wv = tape.param(w.clone());
    let z = bound.h_map(xv, wv)?;
    let d = tape.value(z).len();
    let mut rows = Vec::with_capacity(d);
    for i in 0..d {
        let zi = tape.sum(tape.gather(z, &[i])?);
        rows.push(tape.backward(zi)?.wrt(wv).into_data());
    }
    Ok(spectral_norm(&rows))
}

/// Largest singular value of the matrix with the given rows, by power
/// iteration on `J J^T`.
fn spectral_norm(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            gram[i * n + j] = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
        }
    }
    let trace: f64 = (0..n).map(|i| gram[i * n + i]).sum();
    if trace == 0.0 {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            next[i] = (0..n).map(|j| gram[i * n + j] * v[j]).sum();
        }
        let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        next.iter_mut().for_each(|a| *a /= norm);
        let converged = (norm - lambda).abs() <= 1e-15 * norm;
        lambda = norm;
        v = next;
        if converged {
            break;
        }
    }
    lambda.sqrt()
}

fn pair_ratios(model: &ClbpModel, x: &Tensor, sample: usize, fp: &FixedPoint) -> Result<(Vec<PairRatios>, usize)> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    let n = fp.zs.len();
    for k in 0..n.saturating_sub(2) {
        let dz = fp.zs[k + 1].distance(&fp.zs[k]);
        if dz < MIN_STEP {
            skipped += 1;
            continue;
        }
        let dt = fp.zs[k + 2].distance(&fp.zs[k + 1]);
        let dw = fp.ws[k + 2].distance(&fp.ws[k + 1]);
        let l_g = dw / dz;
        let l_h = h_operator_norm(model, x, &fp.ws[k + 1])?;
        pairs.push(PairRatios {
            sample,
            k,
            q: dt / dz,
            l_g,
            l_h,
            l_h_secant: if dw > 0.0 { dt / dw } else { 0.0 },
            q_gh: l_g * l_h,
        });
    }
    Ok((pairs, skipped))
}

/// Measures the loop constants over the fixed-point trajectories of `samples`.
pub fn estimate_lipschitz(model: &ClbpModel, samples: &[Tensor], mode: &str) -> Result<LipschitzReport> {
    let per: Vec<(Vec<PairRatios>, usize)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let fp = fixed_point(model, x, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL)?;
            pair_ratios(model, x, i, &fp)
        })
        .collect::<Result<_>>()?;
    let skipped = per.iter().map(|p| p.1).sum();
    let pairs: Vec<PairRatios> = per.into_iter().flat_map(|p| p.0).collect();
    let q: Vec<f64> = pairs.iter().map(|p| p.q).collect();
    let q_gh: Vec<f64> = pairs.iter().map(|p| p.q_gh).collect();
    let l_g: Vec<f64> = pairs.iter().map(|p| p.l_g).collect();
    let l_h: Vec<f64> = pairs.iter().map(|p| p.l_h).collect();
    let below = q.iter().filter(|&&v| v < 1.0).count();
    Ok(LipschitzReport {
        mode: mode.into(),
        trajectories: samples.len(),
        skipped,
        mean_q: mean(&q),
        median_q: median(&q),
        mean_q_gh: mean(&q_gh),
        median_q_gh: median(&q_gh),
        mean_l_g: mean(&l_g),
        mean_l_h: mean(&l_h),
        fraction_q_below_one: below as f64 / pairs.len().max(1) as f64,
        pairs,
    })
}

/// Largest step ratio `||z_{k+2} - z_{k+1}|| / ||z_{k+1} - z_k||` along a
/// trajectory; `None` when no pair has a usable denominator.
pub fn trajectory_q(fp: &FixedPoint) -> Option<f64> {
    let mut best: Option<f64> = None;
    for k in 0..fp.zs.len().saturating_sub(2) {
        let dz = fp.zs[k + 1].distance(&fp.zs[k]);
        if dz < MIN_STEP {
            continue;
        }
        let q = fp.zs[k + 2].distance(&fp.zs[k + 1]) / dz;
        best = Some(best.map_or(q, |b: f64| b.max(q)));
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCheck {
    pub sample: usize,
    pub q_hat: f64,
    pub contractive: bool,
    pub iterations: usize,
    /// `max_k d_k / ((q_hat + margin)^k d_0)`; at most 1 on a pass.
    pub worst_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub tol_margin: f64,
    pub max_k: usize,
    pub checks: Vec<TrajectoryCheck>,
    pub contractive: usize,
    pub passed: usize,
    /// Passes among contractive trajectories.
    pub pass_fraction: f64,
}

/// Checks `d_k <= (q_hat + tol_margin)^k d_0` for `k <= max_k` on every
/// trajectory. Trajectories with `q_hat >= 1` are reported as
/// non-contractive rather than failed.
pub fn verify_convergence(
    model: &ClbpModel,
    samples: &[Tensor],
    tol_margin: f64,
    max_k: usize,
) -> Result<ConvergenceReport> {
    let checks: Vec<TrajectoryCheck> = samples
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let fp = fixed_point(model, x, FIXED_POINT_MAX_ITER.max(max_k), FIXED_POINT_TOL)?;
            let q_hat = trajectory_q(&fp).unwrap_or(0.0);
            let d = fp.distances();
            let rate = q_hat + tol_margin;
            let mut worst: f64 = 0.0;
            let mut pass = true;
            for (k, &dk) in d.iter().enumerate().take(max_k + 1) {
                let envelope = rate.powi(k as i32) * d[0];
                if dk > envelope {
                    pass = false;
                }
                if envelope > 0.0 {
                    worst = worst.max(dk / envelope);
                } else if dk > 0.0 {
                    worst = f64::INFINITY;
                }
            }
            Ok(TrajectoryCheck {
                sample: i,
                q_hat,
                contractive: q_hat < 1.0,
                iterations: fp.iterations,
                worst_ratio: worst,
                pass,
            })
        })
        .collect::<Result<_>>()?;
    let contractive = checks.iter().filter(|c| c.contractive).count();
    let passed = checks.iter().filter(|c| c.contractive && c.pass).count();
    Ok(ConvergenceReport {
        tol_margin,
        max_k,
        contractive,
        passed,
        pass_fraction: passed as f64 / contractive.max(1) as f64,
        checks,
    })
}

/// Mean distance to the fixed point and single-view accuracy at each depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub k: usize,
    pub mean_distance: f64,
    pub accuracy: f64,
}

pub fn depth_profile(model: &ClbpModel, split: &Split, max_k: usize) -> Result<Vec<DepthRow>> {
    let s = model.config.logit_scale;
    let per: Vec<Vec<(f64, bool)>> = (0..split.len())
        .into_par_iter()
        .map(|i| {
            let fp = fixed_point(model, &split.xs[i], FIXED_POINT_MAX_ITER.max(max_k), FIXED_POINT_TOL)?;
            let last = fp.zs.len() - 1;
            Ok((0..=max_k)
                .map(|k| {
                    let j = k.min(last);
                    let (z, w) = (&fp.zs[j], &fp.ws[j]);
                    let logits: Vec<f64> = (0..w.rows())
                        .map(|c| s * w.row(c).iter().zip(z.data()).map(|(a, b)| a * b).sum::<f64>())
                        .collect();
                    (z.distance(&fp.z_star), crate::tensor::argmax(&logits) == split.ys[i])
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let n = split.len() as f64;
    Ok((0..=max_k)
        .map(|k| DepthRow {
            k,
            mean_distance: per.iter().map(|p| p[k].0).sum::<f64>() / n,
            accuracy: per.iter().filter(|p| p[k].1).count() as f64 / n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityConfig {
    /// The perturbation has every coordinate at `+-epsilon`.
    pub epsilon: f64,
    pub probes: usize,
    pub probe_norms: Vec<f64>,
    /// Base points `x + t delta` at evenly spaced `t` in `[0, 1]`.
    pub segment_points: usize,
    /// Also take the spectral norm of `dH/dx` at every base point.
    pub jacobian: bool,
    pub seed: u64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            probes: 16,
            probe_norms: vec![1e-3, 1e-2],
            segment_points: 3,
            jacobian: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRecord {
    pub sample: usize,
    /// `||z*(x + delta) - z*(x)||`.
    pub measured: f64,
    pub delta_l2: f64,
    pub l_x: f64,
    pub q_hat: f64,
    /// `l_x / (1 - q_hat) * ||delta||`, infinite when `q_hat >= 1`.
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub records: Vec<StabilityRecord>,
    pub non_contractive: usize,
    pub pass_fraction: f64,
}

pub fn stability_bound(l_x: f64, q_hat: f64, delta_norm: f64) -> f64 {
    if q_hat < 1.0 {
        l_x / (1.0 - q_hat) * delta_norm
    } else {
        f64::INFINITY
    }
}

/// `max ||H_{x + h u}(W) - H_x(W)|| / h` over random unit directions `u`,
/// probe norms `h`, and the given prototype matrices.
pub fn input_lipschitz<R: Rng + ?Sized>(
    model: &ClbpModel,
    x: &Tensor,
    ws: &[Tensor],
    cfg: &StabilityConfig,
    rng: &mut R,
) -> Result<f64> {
    let dirs: Vec<Tensor> = (0..cfg.probes)
        .map(|_| {
            let g = Tensor::new(
                x.shape().to_vec(),
                (0..x.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            )
            .expect("shape");
            let n = g.norm_l2();
            g.map(|v| v / n)
        })
        .collect();
    let mut best: f64 = 0.0;
    for w in ws {
        let base = apply_h(model, x, w)?;
        for u in &dirs {
            for &h in &cfg.probe_norms {
                let xp = x.zip_map(u, |a, b| a + h * b)?;
                let moved = apply_h(model, &xp, w)?;
                best = best.max(moved.distance(&base) / h);
            }
        }
    }
    Ok(best)
}

/// Largest singular value of `dH_x(W)/dx` at `x`.
pub fn input_jacobian_norm(model: &ClbpModel, x: &Tensor, w: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false)?;
    let xv = tape.param(x.clone());
    let wv = tape.constant(w.clone());
    let z = bound.h_map(xv, wv)?;
    let d = tape.value(z).len();
    let mut rows = Vec::with_capacity(d);
    for i in 0..d {
        let zi = tape.sum(tape.gather(z, &[i])?);
        rows.push(tape.backward(zi)?.wrt(xv).into_data());
    }
    Ok(spectral_norm(&rows))
}

/// Compares fixed-point displacement under a sign perturbation of size
/// `epsilon` with the stability bound built from measured constants.
pub fn verify_stability(model: &ClbpModel, samples: &[Tensor], cfg: &StabilityConfig) -> Result<StabilityReport> {
    let records: Vec<StabilityRecord> = samples
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[tag::PROBE, i as u64]));
            let delta = Tensor::new(
                x.shape().to_vec(),
                (0..x.len())
                    .map(|_| if rng.random::<bool>() { cfg.epsilon } else { -cfg.epsilon })
                    .collect(),
            )?;
            let xp = x.zip_map(&delta, |a, b| a + b)?;
            let fp = fixed_point(model, x, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL)?;
            let fpp = fixed_point(model, &xp, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL)?;
            let q_hat = trajectory_q(&fp)
                .unwrap_or(0.0)
                .max(trajectory_q(&fpp).unwrap_or(0.0));
            // Reachable prototypes: the first loop round and the limit, on
            // both trajectories.
            let mut ws = vec![fp.ws[1.min(fp.ws.len() - 1)].clone(), fp.ws.last().expect("ws").clone()];
            ws.push(fpp.ws[1.min(fpp.ws.len() - 1)].clone());
            ws.push(fpp.ws.last().expect("ws").clone());
            let mut l_x: f64 = 0.0;
            let points = cfg.segment_points.max(1);
            for j in 0..points {
                let t = if points == 1 { 0.0 } else { j as f64 / (points - 1) as f64 };
                let base = x.zip_map(&delta, |a, b| a + t * b)?;
                l_x = l_x.max(input_lipschitz(model, &base, &ws, cfg, &mut rng)?);
                if cfg.jacobian {
                    for w in &ws {
                        l_x = l_x.max(input_jacobian_norm(model, &base, w)?);
                    }
                }
            }
            let measured = fpp.z_star.distance(&fp.z_star);
            let delta_l2 = delta.norm_l2();
            let bound = stability_bound(l_x, q_hat, delta_l2);
            Ok(StabilityRecord {
                sample: i,
                measured,
                delta_l2,
                l_x,
                q_hat,
                bound,
                pass: measured <= bound,
            })
        })
        .collect::<Result<_>>()?;
    let non_contractive = records.iter().filter(|r| r.q_hat >= 1.0).count();
    let passed = records.iter().filter(|r| r.pass).count();
    Ok(StabilityReport {
        pass_fraction: passed as f64 / records.len().max(1) as f64,
        non_contractive,
        records,
    })
}
