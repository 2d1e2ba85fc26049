//! AdamW, cosine annealing and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// First-moment accumulators, one per parameter tensor.
    pub m: Vec<Vec<f64>>,
    /// Second-moment accumulators.
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update with learning rate `lr`. At `lr == 0` parameters are left
    /// bit-identical, though the moments still advance.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                if lr == 0.0 {
                    continue;
                }
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= lr * self.weight_decay * *pv;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine-annealed rate: `base` at step 0, zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Global l2 norm across all tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(2e-2, 0, 100), 2e-2);
        assert!(cosine_lr(2e-2, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(2e-2, 50, 100) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let mut p = Tensor::vector(vec![0.3, -1.7]);
        let before = p.clone();
        let mut opt = AdamW::new(&[2], 1e-4);
        opt.step(&mut [&mut p], &[Tensor::vector(vec![1.0, 2.0])], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0]), Tensor::vector(vec![12.0])];
        let pre = clip_global_norm(&mut g, 1.0);
        assert_eq!(pre, 13.0);
        assert!(global_norm(&g) <= 1.0 + 1e-12);
        let mut small = vec![Tensor::vector(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut p = Tensor::vector(vec![1.0, 1.0]);
        let mut opt = AdamW::new(&[2], 0.0);
        opt.step(&mut [&mut p], &[Tensor::vector(vec![0.5, -3.0])], 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-6);
    }
}
