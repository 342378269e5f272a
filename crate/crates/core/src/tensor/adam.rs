//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::params::ParamSet;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero-initialized moments shaped like `params`.
    pub fn new(params: &ParamSet) -> AdamState {
        let m = (0..params.len()).map(|i| vec![0.0; params.tensor(i).len()]).collect();
        let v = (0..params.len()).map(|i| vec![0.0; params.tensor(i).len()]).collect();
        AdamState { m, v, step: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over every parameter; `grads` is indexed like the
    /// parameter set. Rejects non-finite gradients naming the parameter.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::Usage(format!("learning rate must be positive, got {lr}")));
        }
        if grads.len() != params.len() {
            return Err(Error::Usage(format!(
                "got {} gradient buffers for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, gbuf) in grads.iter().enumerate() {
            if gbuf.len() != params.tensor(i).len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("gradient size mismatch for {}", params.name(i)),
                });
            }
            if let Some(bad) = gbuf.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} is {} at flat index {bad}",
                    params.name(i),
                    gbuf[bad]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, gbuf) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut params.tensor_mut(i).data;
            for (j, &g) in gbuf.iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
