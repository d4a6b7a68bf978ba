use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments per parameter, with bias correction.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            ..Default::default()
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            if let Some(p) = params.get(name) {
                if p.shape() != g.shape() {
                    return shape_err("adam", p.shape(), g.shape());
                }
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: Vec<f64>) -> BTreeMap<String, Tensor> {
        let n = v.len();
        [(name.to_string(), Tensor::new(&[n], v).unwrap())].into()
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        let mut p = single("w", vec![1.0, -1.0, 0.5]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &single("w", vec![3.0, -0.01, 0.0])).unwrap();
        let w = p["w"].data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single("w", vec![2.0, 3.0]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut p, &single("w", vec![0.0, 0.0])).unwrap();
        }
        assert_eq!(p["w"].data(), &[2.0, 3.0]);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // f(w) = (w - 3)^2
        let mut p = single("w", vec![2.95]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..100 {
            let w = p["w"].data()[0];
            adam.step(&mut p, &single("w", vec![2.0 * (w - 3.0)])).unwrap();
        }
        assert!((p["w"].data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = single("w", vec![0.0; 3]);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(&mut p, &single("w", vec![0.0; 2])).is_err());
        assert_eq!(adam.steps_taken(), 0);
    }
}
