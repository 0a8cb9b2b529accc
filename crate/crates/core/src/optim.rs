//! Adam with bias correction and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::encoder::ParameterSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global L2 norm above which gradients are rescaled; `0` disables.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: 1.0,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: ParameterSet<f32>,
    pub v: ParameterSet<f32>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ParameterSet<f32>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Global L2 norm of a gradient set, accumulated in f64.
    pub fn grad_norm(grads: &ParameterSet<f32>) -> f64 {
        grads
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update to every tensor of `params` for which `trainable`
    /// holds. Returns the pre-clipping gradient norm.
    pub fn update(
        &mut self,
        params: &mut ParameterSet<f32>,
        grads: &ParameterSet<f32>,
        learning_rate: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> f64 {
        let norm = Self::grad_norm(grads);
        let clip = if self.config.max_grad_norm > 0.0 && norm > self.config.max_grad_norm {
            self.config.max_grad_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.data_mut(name);
            for (mi, &gi) in m.iter_mut().zip(&g.data) {
                *mi = (b1 * *mi as f64 + (1.0 - b1) * gi as f64 * clip) as f32;
            }
            let v = self.v.data_mut(name);
            for (vi, &gi) in v.iter_mut().zip(&g.data) {
                let gc = gi as f64 * clip;
                *vi = (b2 * *vi as f64 + (1.0 - b2) * gc * gc) as f32;
            }
            let (m, v) = (self.m.data(name), self.v.data(name));
            for ((w, &mi), &vi) in p.data.iter_mut().zip(m).zip(v) {
                let mhat = mi as f64 / bc1;
                let vhat = vi as f64 / bc2;
                *w = (*w as f64 - learning_rate * mhat / (vhat.sqrt() + self.config.epsilon)) as f32;
            }
        }
        norm
    }
}
