//! Adam with linear learning-rate warmup.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            warmup_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Learning rate in effect at `step` (0-based): ramps linearly from 0 to
    /// `lr` over the warmup window, then stays flat.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    moments: BTreeMap<String, Moments>,
    last_step: Option<u64>,
    updates: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            moments: BTreeMap::new(),
            last_step: None,
            updates: 0,
        }
    }

    /// Applies one update using the gradients held in `params`. `step` must
    /// strictly increase between calls.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, step: u64) -> Result<f64> {
        if let Some(last) = self.last_step {
            if step <= last {
                return Err(Error::StepOrder { last, got: step });
            }
        }
        self.last_step = Some(step);
        self.updates += 1;
        let lr = self.config.lr_at(step);
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.updates as i32;
        let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (name, value, grad) in params.iter_mut_with_grads() {
            let mo = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; value.numel()],
                v: vec![0.0; value.numel()],
            });
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(mo.m.iter_mut())
                .zip(mo.v.iter_mut())
            {
                let g = g.to_f64_lossy();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p = T::from_f64_lossy(p.to_f64_lossy() - update);
            }
        }
        Ok(lr)
    }
}
