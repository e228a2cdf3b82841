//! Adam with global-norm gradient clipping.
//!
//! Optimizer state is created lazily and only for parameters that actually
//! receive gradients, i.e. the trainable set of the current run. Frozen
//! parameters are never touched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::UnifiedModel;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    state: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Names holding optimizer state (the parameters updated so far).
    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// Applies one update from per-parameter gradients. Only trainable
    /// parameters may appear in `grads`; everything else is left
    /// bit-identical.
    pub fn step(
        &mut self,
        model: &mut UnifiedModel,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        for name in grads.keys() {
            let p = model.params.get(name)?;
            if !p.trainable {
                return Err(Error::Contract(format!(
                    "gradient supplied for frozen parameter {name}"
                )));
            }
        }

        let mut scale = 1.0;
        if self.cfg.clip_norm > 0.0 {
            let sq: f64 = grads
                .values()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = sq.sqrt();
            if norm > self.cfg.clip_norm {
                scale = self.cfg.clip_norm / norm;
            }
        }

        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);

        for (name, grad) in grads {
            let value = model.params.value_mut(name)?;
            if value.numel() != grad.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    expected: format!("{} gradient elements for {name}", value.numel()),
                    got: format!("{}", grad.len()),
                });
            }
            let slot = self.state.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let data = value.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] * scale;
                slot.m[i] = self.cfg.beta1 * slot.m[i] + (1.0 - self.cfg.beta1) * g;
                slot.v[i] = self.cfg.beta2 * slot.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
