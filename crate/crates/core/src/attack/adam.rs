//! Adam with step-wise exponential learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// `lr·decay^floor(step / every)` for a zero-based `step`.
pub fn decayed_lr(lr: f64, decay: f64, every: usize, step: usize) -> f64 {
    lr * decay.powi((step / every.max(1)) as i32)
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[Tensor]) -> Self {
        Adam {
            cfg,
            m: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.numel()]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected update of every tensor in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (i, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = beta1 * *m + (1.0 - beta1) * d;
                *v = beta2 * *v + (1.0 - beta2) * d * d;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let g = vec![Tensor::from_vec(vec![0.3, -40.0])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &g, 0.1);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::from_vec(vec![5.0])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for step in 0..2000 {
            let g = vec![p[0].map(|x| 2.0 * (x - 1.5))];
            adam.step(&mut p, &g, decayed_lr(0.1, 0.99, 50, step));
        }
        assert!((p[0].data()[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(decayed_lr(0.4, 0.5, 10, 9), 0.4);
        assert_eq!(decayed_lr(0.4, 0.5, 10, 10), 0.2);
        assert_eq!(decayed_lr(0.4, 0.5, 10, 25), 0.1);
    }
}
