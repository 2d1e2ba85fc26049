//! Measurements behind the stability results: empirical Lipschitz constants
//! of the loop, geometric convergence, fixed-point stability under input
//! perturbation, the feature-margin lemma, the outlier-weight bound,
//! margin/feature-shift diagnostics, and linear CKA.

mod bounds;
mod cka;
mod diagnostics;
mod lipschitz;

pub use bounds::{
    margin_counterexample, verify_margin_lemma, verify_outlier_bound, LemmaReport,
    MarginCounterexample, OutlierReport,
};
pub use cka::{layerwise_cka, linear_cka, visual_layers, LayerCka};
pub use diagnostics::{diagnostics, DiagnosticsRecord, DiagnosticsSummary, ModelDiagnostics};
pub use lipschitz::{
    depth_profile, estimate_lipschitz, h_operator_norm, input_jacobian_norm, input_lipschitz, stability_bound, trajectory_q,
    verify_convergence, verify_stability, ConvergenceReport, DepthRow, LipschitzReport,
    PairRatios, StabilityConfig, StabilityRecord, StabilityReport, TrajectoryCheck,
};

/// Arithmetic mean; NaN for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median (average of the middle pair for even length); NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
