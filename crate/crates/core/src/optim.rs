//! Adaptive-moment optimizer with decoupled weight decay, plus the warmup schedule.

use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamWState<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], steps: 0 }
    }

    /// One update at learning rate `lr`. Decay is applied to the parameter
    /// directly, not folded into the gradient.
    pub fn step(&mut self, cfg: &AdamWConfig, lr: f64, params: &mut [T], grads: &[T]) {
        debug_assert_eq!(params.len(), grads.len());
        self.steps += 1;
        let b1 = T::from_f64_lossy(cfg.beta1);
        let b2 = T::from_f64_lossy(cfg.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(self.steps as i32));
        let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(self.steps as i32));
        let lr_t = T::from_f64_lossy(lr);
        let decay = T::from_f64_lossy(1.0 - lr * cfg.weight_decay);
        let eps = T::from_f64_lossy(cfg.eps);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Linear warmup over `warmup` steps, then constant. Steps count from 1.
pub fn warmup_lr(base: f64, step: usize, warmup: usize) -> f64 {
    if warmup > 0 && step <= warmup {
        base * step as f64 / warmup as f64
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        assert_eq!(warmup_lr(0.3, 1, 120), 0.3 / 120.0);
        assert_eq!(warmup_lr(0.3, 60, 120), 0.15);
        assert_eq!(warmup_lr(0.3, 120, 120), 0.3);
        assert_eq!(warmup_lr(0.3, 500, 120), 0.3);
        assert_eq!(warmup_lr(0.3, 1, 0), 0.3);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut state = AdamWState::<f64>::new(2);
        let mut p = vec![1.0, -1.0];
        state.step(&cfg, 0.1, &mut p, &[0.5, -2.0]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = AdamWConfig { weight_decay: 0.5, ..Default::default() };
        let mut state = AdamWState::<f64>::new(1);
        let mut p = vec![2.0];
        state.step(&cfg, 0.1, &mut p, &[0.0]);
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }
}
