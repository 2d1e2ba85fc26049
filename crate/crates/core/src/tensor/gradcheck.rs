//! Central-difference gradient oracle.

use super::Tensor;

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;

/// Numerical gradient of a scalar function by central differences.
pub fn numerical_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let scale = a.norm_l2().max(b.norm_l2()).max(floor);
    a.distance(b) / scale
}

/// Largest entrywise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_entry_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
