//! Learning-rate schedule and Adam.

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

/// Linear warmup from 0 to `peak` over `warmup` iterations, then linear
/// decay to 0 at `max_iters`.
pub fn lr_at(iter: usize, peak: f64, warmup: usize, max_iters: usize) -> f64 {
    if iter >= max_iters {
        return 0.0;
    }
    if iter < warmup {
        return peak * (iter as f64 / warmup as f64);
    }
    peak * ((max_iters - iter) as f64 / (max_iters - warmup) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments kept in f64 per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    /// One update. `grads[i]` is `None` for parameters that got no gradient.
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *w = T::from_f64_lossy(w.as_f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let peak = 5e-5;
        assert_eq!(lr_at(0, peak, 1000, 120_000), 0.0);
        assert_eq!(lr_at(1000, peak, 1000, 120_000), peak);
        assert_eq!(lr_at(120_000, peak, 1000, 120_000), 0.0);
        assert!((lr_at(60_500, peak, 1000, 120_000) - peak / 2.0).abs() < 1e-18);
        assert!((lr_at(500, peak, 1000, 120_000) - peak / 2.0).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::new(vec![2], vec![1.0, -1.0]).unwrap()];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let g = vec![Some(Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())];
        adam.step(&mut p, &g, 0.1);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }
}
