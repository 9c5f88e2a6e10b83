//! First-order optimizers over named parameter tensors.
//!
//! Both optimizers consume the gradient installed on each parameter
//! (erroring when one is missing or non-finite) and clear it after the
//! update, so every training step must run its own backward pass first.

use super::{Tensor, TensorError};

/// Plain stochastic gradient descent: `w ← w − lr·g`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f32,
    pub step_count: u64,
}

impl Sgd {
    pub fn new(learning_rate: f32) -> Self {
        Sgd { learning_rate, step_count: 0 }
    }

    /// Applies one update to every parameter and clears the gradients.
    pub fn step(&mut self, params: &mut [(&'static str, &mut Tensor)]) -> Result<(), TensorError> {
        for (name, p) in params.iter_mut() {
            let grad = p
                .take_grad()
                .ok_or_else(|| TensorError::MissingGrad { param: (*name).to_string() })?;
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(TensorError::NonFinite { op: "sgd_step" });
            }
            let lr = self.learning_rate;
            for (w, g) in p.values_mut().iter_mut().zip(grad.iter()) {
                *w -= lr * g;
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Adam with bias correction; auxiliary moment buffers are allocated on
/// the first step and must keep matching the parameter shapes exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step_count: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(learning_rate: f32, beta1: f32, beta2: f32) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every parameter and clears the gradients.
    pub fn step(&mut self, params: &mut [(&'static str, &mut Tensor)]) -> Result<(), TensorError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} moment buffers for {} params", self.m.len(), params.len()),
            });
        }
        let t = self.step_count + 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t as i32);
        for (idx, (name, p)) in params.iter_mut().enumerate() {
            let grad = p
                .take_grad()
                .ok_or_else(|| TensorError::MissingGrad { param: (*name).to_string() })?;
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(TensorError::NonFinite { op: "adam_step" });
            }
            if self.m[idx].len() != grad.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "moment buffer {} has {} values, parameter {} has {}",
                        idx,
                        self.m[idx].len(),
                        name,
                        grad.len()
                    ),
                });
            }
            let (b1, b2) = (self.beta1, self.beta2);
            let lr = self.learning_rate;
            let eps = self.eps;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((w, &g), (mi, vi)) in p
                .values_mut()
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = (*mi as f64 / bc1) as f32;
                let v_hat = (*vi as f64 / bc2) as f32;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step_count = t;
        Ok(())
    }
}
