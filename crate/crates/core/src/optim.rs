//! Adam with per-epoch multiplicative learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tensor};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// `lr0 * decay^epoch`.
pub fn lr_schedule(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    /// One bias-corrected Adam step over every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in &grads.grads {
            let Ok(p) = params.get_mut(name) else { continue };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(1e-4, 0.99, 0), 1e-4);
        assert!((lr_schedule(1e-4, 0.99, 1) - 9.9e-5).abs() < 1e-18);
        let direct = 1e-4 * (0..100).fold(1.0, |acc, _| acc * 0.99);
        assert!((lr_schedule(1e-4, 0.99, 100) - direct).abs() < 1e-18);
        assert!((lr_schedule(1e-4, 0.99, 100) - 3.660e-5).abs() < 1e-8);
        let seq: Vec<f64> = (0..150).map(|e| lr_schedule(1e-4, 0.99, e)).collect();
        assert!(seq.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn only_params_with_gradients_move() {
        let mut p = ParamStore::new();
        p.insert("a", ArrayD::ones(IxDyn(&[2])));
        p.insert("b", ArrayD::ones(IxDyn(&[2])));
        let mut g = Gradients::new();
        g.add("a", &ArrayD::ones(IxDyn(&[2])));
        let mut opt = Adam::new(AdamConfig::default());
        opt.update(&mut p, &g, 0.1);
        assert!(p.get("a").unwrap().iter().all(|&v| (v - 0.9).abs() < 1e-6));
        assert!(p.get("b").unwrap().iter().all(|&v| v == 1.0));
    }
}
