use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        validate_lr(cfg.lr)?;
        Ok(Self {
            cfg,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        validate_lr(lr)?;
        self.cfg.lr = lr;
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor of `params` from its accumulated
    /// gradient. Tensors without a gradient are treated as having a zero one.
    pub fn step(&mut self, params: &mut ParamStore) {
        if self.first.len() != params.len() {
            self.first = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            if !t.requires_grad {
                continue;
            }
            let grad = t.grad.take();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let values = t.values_mut();
            for j in 0..values.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                if weight_decay != 0.0 {
                    values[j] -= lr * weight_decay * values[j];
                }
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            t.grad = grad;
        }
    }
}

fn validate_lr(lr: f64) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}
