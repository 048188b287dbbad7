//! Adam with bias correction, operating on named parameter tensors.
//!
//! Moment slots are allocated lazily on the first step and keyed by position,
//! so callers must pass parameters in a stable order (the model's canonical
//! parameter order). A non-finite gradient aborts the step with an error
//! naming the parameter, leaving all parameters untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Slot {
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    lr: f64,
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig) -> Adam {
        Adam { lr, cfg, step: 0, slots: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `(name, parameter)` pairs and their gradients, in
    /// matching order. Checks every gradient for finiteness *before* touching
    /// any parameter, so a failed step leaves the model unchanged.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|(_, p)| Slot { m: Tensor::zeros(p.shape()), v: Tensor::zeros(p.shape()) })
                .collect();
        }
        assert_eq!(self.slots.len(), params.len(), "parameter count changed between steps");

        for ((name, p), g) in params.iter().zip(grads) {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient for parameter `{name}`")));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (slot, ((_, p), g)) in self.slots.iter_mut().zip(params.iter_mut().zip(grads)) {
            let (b1, b2, eps, lr) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.lr);
            let pd = p.data_mut();
            let md = slot.m.data_mut();
            let vd = slot.v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients in place so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
