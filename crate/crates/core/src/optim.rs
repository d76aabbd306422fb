//! Adam and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. Parameters with `frozen[i] == true` are left alone.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64, frozen: &[bool]) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.get_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                w[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Cosine annealing from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_is_non_increasing_and_ends_near_zero() {
        let total = 1000;
        let lrs: Vec<f64> = (0..total).map(|s| cosine_lr(1e-4, s, total)).collect();
        assert_eq!(lrs[0], 1e-4);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(*lrs.last().unwrap() < 1e-9);
        assert_eq!(cosine_lr(1e-4, total, total), 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr_in_gradient_sign() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &[vec![2.0, -0.5, 0.0]], 0.1, &[]);
        let w = p.get(0).data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] - 1.1).abs() < 1e-7);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(&p, AdamConfig::default());
        for _ in 0..2000 {
            let g: Vec<f64> = p.get(0).data().iter().map(|w| 2.0 * w).collect();
            adam.step(&mut p, &[g], 0.01, &[]);
        }
        assert!(p.get(0).data().iter().all(|w| w.abs() < 1e-2));
    }

    #[test]
    fn frozen_entries_are_untouched() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::filled(&[2], 1.0));
        p.push("b", Tensor::filled(&[2], 1.0));
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &[vec![1.0; 2], vec![1.0; 2]], 0.1, &[false, true]);
        assert_eq!(p.get(1).data(), &[1.0, 1.0]);
        assert_ne!(p.get(0).data(), &[1.0, 1.0]);
    }
}
