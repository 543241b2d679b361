use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Result};

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self::with_betas(len, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        ensure_shape!(
            params.len() == grads.len(),
            "adam: {} params but {} grads",
            params.len(),
            grads.len()
        );
        ensure_shape!(
            params.len() == self.first_moment.len(),
            "adam: state sized for {} params, got {}",
            self.first_moment.len(),
            params.len()
        );
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
