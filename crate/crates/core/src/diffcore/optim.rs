use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{Param, ParamStore};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("learning rate must be positive, got {0}")]
    NonPositiveLr(f64),
    #[error("weight decay must be non-negative, got {0}")]
    NegativeDecay(f64),
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamW {
    /// One update from the gradients currently held in `params`. Parameters
    /// flagged `no_decay` skip the decoupled decay term.
    pub fn step(&self, params: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<(), OptimError> {
        self.step_scaled(params, lr, weight_decay, |_| 1.0)
    }

    /// Like [`AdamW::step`], with the learning rate of each parameter
    /// multiplied by `lr_scale(param)`.
    pub fn step_scaled(
        &self,
        params: &mut ParamStore,
        lr: f64,
        weight_decay: f64,
        lr_scale: impl Fn(&Param) -> f64,
    ) -> Result<(), OptimError> {
        if !(lr > 0.0) {
            return Err(OptimError::NonPositiveLr(lr));
        }
        if weight_decay < 0.0 {
            return Err(OptimError::NegativeDecay(weight_decay));
        }
        params.step += 1;
        let t = params.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            let lr = lr * lr_scale(p);
            let decay = if p.no_decay { 0.0 } else { lr * weight_decay };
            for i in 0..p.value.data.len() {
                let g = p.grad[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                let w = &mut p.value.data[i];
                *w -= decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Half-cosine decay from `base_lr` to `min_lr` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let s = step.min(self.total_steps) as f64;
        let frac = s / self.total_steps as f64;
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
