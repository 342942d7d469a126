//! Adam with bias correction.
//!
//! Moment buffers are indexed by slot so one optimizer instance can drive
//! any fixed, ordered set of parameter tensors (the backbone during
//! training, or just the gates during calibration).

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// `sizes[i]` is the element count of the parameter in slot `i`.
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Adam {
            cfg,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Advances the shared step counter; call once before the slot updates
    /// of each optimization step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to the parameter in `slot`.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        assert!(self.t > 0, "begin_step must run before update");
        assert_eq!(param.len(), grad.len());
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        assert_eq!(param.len(), m.len(), "slot size changed");
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - libm_pow(b1, self.t);
        let bc2 = 1.0 - libm_pow(b2, self.t);
        for i in 0..param.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= self.cfg.lr * mhat / (fmath::sqrt(vhat) + self.cfg.eps);
        }
    }
}

/// Integer power by squaring; avoids pulling a float `pow` into no_std.
fn libm_pow(base: f64, mut exp: u64) -> f64 {
    let mut acc = 1.0;
    let mut b = base;
    while exp > 0 {
        if exp & 1 == 1 {
            acc *= b;
        }
        b *= b;
        exp >>= 1;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w0 - 3)^2 + (w1 + 1)^2
        let mut w = [0.0f64, 0.0];
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &[2],
        );
        for _ in 0..400 {
            let grad = [2.0 * (w[0] - 3.0), 2.0 * (w[1] + 1.0)];
            opt.begin_step();
            opt.update(0, &mut w, &grad);
        }
        assert!((w[0] - 3.0).abs() < 1e-3, "w0 = {}", w[0]);
        assert!((w[1] + 1.0).abs() < 1e-3, "w1 = {}", w[1]);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        let mut w = [10.0f64];
        let mut opt = Adam::new(AdamConfig::default(), &[1]);
        opt.begin_step();
        opt.update(0, &mut w, &[0.004]);
        // With bias correction the first step is ≈ lr regardless of grad scale.
        assert!((10.0 - w[0] - 0.01).abs() < 1e-6, "step = {}", 10.0 - w[0]);
    }

    #[test]
    fn int_pow_matches_repeated_multiply() {
        // Squaring associates differently, so allow a few ulps of drift.
        let mut acc = 1.0;
        for k in 0..20u64 {
            assert!((libm_pow(0.9, k) - acc).abs() <= 1e-15 * acc);
            acc *= 0.9;
        }
    }
}
