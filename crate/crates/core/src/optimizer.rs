//! Adam with decoupled weight decay.

use crate::model::Model;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first/second moments plus the step counter. Moment slots
/// follow the model's canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moments: Vec<Vec<f64>>,
    pub second_moments: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &Model, config: AdamConfig) -> OptimizerState {
        let mut sizes = Vec::new();
        model.for_each_param(|_, t| sizes.push(t.numel()));
        OptimizerState {
            config,
            step: 0,
            first_moments: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moments: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One decoupled-weight-decay Adam step over all parameters.
    /// `grads` must follow the canonical parameter order; shapes must match.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(
            grads.len(),
            self.first_moments.len(),
            "gradient list does not match parameter list"
        );
        self.step += 1;
        let t = self.step;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(t as i32);
        let bias2 = 1.0 - beta2.powi(t as i32);

        let mut idx = 0;
        model.for_each_param_mut(|name, tensor| {
            let grad = &grads[idx];
            assert_eq!(
                grad.len(),
                tensor.numel(),
                "gradient shape mismatch for {name}"
            );
            let m = &mut self.first_moments[idx];
            let v = &mut self.second_moments[idx];
            let decay = if name.ends_with("bias") || name.ends_with("gain") {
                0.0 // norms and biases are conventionally excluded
            } else {
                weight_decay
            };
            for (i, value) in tensor.values_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *value -= lr * decay * *value;
                *value -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}
