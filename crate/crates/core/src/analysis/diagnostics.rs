use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::median;
use crate::attack::{self, AttackConfig};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::eval::defense_seed;
use crate::pipeline::Pipeline;
use crate::tensor::{argmax, Tensor};

/// One model's view of one sample, clean and under its own white-box attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    /// `l_y - max_{c != y} l_c` on the clean input.
    pub clean_margin: f64,
    pub adv_margin: f64,
    pub clean_correct: bool,
    pub adv_correct: bool,
    /// `cos(z, w_y)` on the adversarial input.
    pub adv_cos_correct: f64,
    /// Largest `cos(z, w_c)` over `c != y` on the adversarial input.
    pub adv_cos_competitor: f64,
    /// `||z(x_adv) - z(x)||`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub sample: usize,
    pub label: usize,
    pub baseline: ModelDiagnostics,
    pub clbp: ModelDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub n: usize,
    pub median_delta_baseline: f64,
    pub median_delta_clbp: f64,
    pub median_clean_margin_baseline: f64,
    pub median_adv_margin_baseline: f64,
    pub median_clean_margin_clbp: f64,
    /// Margins of the defended model on its own adversarial inputs.
    pub median_adv_margin_clbp: f64,
    pub fraction_delta_below_diagonal: f64,
}

fn margin(logits: &[f64], y: usize) -> f64 {
    let rival = logits
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[y] - rival
}

/// Cosine of `z` with each row of `w`; both sides are unit vectors up to
/// rounding, but are renormalised here anyway.
fn cosines(z: &Tensor, w: &Tensor) -> Vec<f64> {
    let zn = z.norm_l2();
    (0..w.rows())
        .map(|c| {
            let row = w.row(c);
            let dot: f64 = row.iter().zip(z.data()).map(|(a, b)| a * b).sum();
            let rn = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            dot / (zn * rn)
        })
        .collect()
}

fn inspect(
    pipeline: &dyn Pipeline,
    x: &Tensor,
    y: usize,
    attack_cfg: &AttackConfig,
    sample: usize,
    dseed: u64,
) -> Result<ModelDiagnostics> {
    let x_adv = attack::attack(pipeline, x, y, attack_cfg, sample as u64)?.x_adv;
    let clean = pipeline.logits(x, dseed)?;
    let adv = pipeline.logits(&x_adv, dseed)?;
    let (z, _) = pipeline.features(x)?;
    let (za, wa) = pipeline.features(&x_adv)?;
    let cos = cosines(&za, &wa);
    let competitor = cos
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ModelDiagnostics {
        clean_margin: margin(clean.data(), y),
        adv_margin: margin(adv.data(), y),
        clean_correct: argmax(clean.data()) == y,
        adv_correct: argmax(adv.data()) == y,
        adv_cos_correct: cos[y],
        adv_cos_competitor: competitor,
        delta: za.distance(&z),
    })
}

/// Margins, cosine decomposition and feature shifts for a baseline and a
/// defended pipeline, each attacked white-box with `attack_cfg`.
pub fn diagnostics(
    baseline: &dyn Pipeline,
    clbp: &dyn Pipeline,
    split: &Split,
    attack_cfg: &AttackConfig,
    eval_seed: u64,
) -> Result<(Vec<DiagnosticsRecord>, DiagnosticsSummary)> {
    if split.is_empty() {
        return Err(Error::config("diagnostics split is empty"));
    }
    let records: Vec<DiagnosticsRecord> = (0..split.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = (&split.xs[i], split.ys[i]);
            let dseed = defense_seed(eval_seed, i);
            Ok(DiagnosticsRecord {
                sample: i,
                label: y,
                baseline: inspect(baseline, x, y, attack_cfg, i, dseed)?,
                clbp: inspect(clbp, x, y, attack_cfg, i, dseed)?,
            })
        })
        .collect::<Result<_>>()?;
    let col = |f: fn(&DiagnosticsRecord) -> f64| median(&records.iter().map(f).collect::<Vec<_>>());
    let below = records.iter().filter(|r| r.clbp.delta < r.baseline.delta).count();
    let summary = DiagnosticsSummary {
        n: records.len(),
        median_delta_baseline: col(|r| r.baseline.delta),
        median_delta_clbp: col(|r| r.clbp.delta),
        median_clean_margin_baseline: col(|r| r.baseline.clean_margin),
        median_adv_margin_baseline: col(|r| r.baseline.adv_margin),
        median_clean_margin_clbp: col(|r| r.clbp.clean_margin),
        median_adv_margin_clbp: col(|r| r.clbp.adv_margin),
        fraction_delta_below_diagonal: below as f64 / records.len() as f64,
    };
    Ok((records, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_sign_matches_prediction() {
        let l = [0.2, 1.5, -0.3];
        assert!(margin(&l, 1) > 0.0);
        assert!(margin(&l, 0) < 0.0);
        assert_eq!(margin(&l, 1), 1.3);
    }

    #[test]
    fn cosines_of_unit_rows() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = Tensor::vector(vec![0.6, 0.8]);
        let c = cosines(&z, &w);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
    }
}
