//! AdamW with decoupled weight decay, plus the warmup + cosine LR schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First/second moment state aligned with a [`ParamStore`] by index.
pub struct AdamW {
    pub cfg: AdamWConfig,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every parameter. `grads` aligns with the store by
    /// index. Moments are bias-corrected; weight decay is applied directly to
    /// the parameter (decoupled), so decay never enters the moment estimates.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Training(format!(
                "got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = (0..params.len())
                .map(|i| vec![0.0; params.tensor(i).numel()])
                .collect();
            self.v = self.m.clone();
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params.tensor(i).numel() {
                return Err(Error::Training(format!(
                    "gradient length {} does not match parameter '{}' ({} elements)",
                    g.len(),
                    params.name(i),
                    params.tensor(i).numel()
                )));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient {bad} for parameter '{}'",
                    params.name(i)
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.tensor_mut(i).data_mut();
            for j in 0..g.len() {
                let gj = g[j] as f64;
                let mj = self.cfg.beta1 * m[j] as f64 + (1.0 - self.cfg.beta1) * gj;
                let vj = self.cfg.beta2 * v[j] as f64 + (1.0 - self.cfg.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mhat = mj / c1;
                let vhat = vj / c2;
                let update = mhat / (vhat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * p[j] as f64;
                p[j] = (p[j] as f64 - self.cfg.lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.base_lr;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let progress = progress.min(1.0);
        self.min_lr
            + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
