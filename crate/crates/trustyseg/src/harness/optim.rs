//! Adaptive-moment gradient descent on the head parameters.

use crate::error::Result;
use crate::head::HeadParams;
use crate::tensor::Tensor;

pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Consumes the gradients accumulated on `params` and returns the
    /// updated parameter set; tensors without a gradient are treated as
    /// having a zero gradient.
    pub fn step(&mut self, params: &HeadParams) -> Result<HeadParams> {
        if self.first.is_empty() {
            for t in params.tensors() {
                self.first.push(vec![0.0; t.numel()]);
                self.second.push(vec![0.0; t.numel()]);
            }
        }
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut slot = 0;
        params.map_tensors(|t| {
            let grad = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            let mut values = t.values().to_vec();
            for i in 0..values.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
            slot += 1;
            Tensor::param(t.shape().to_vec(), values)
        })
    }
}
