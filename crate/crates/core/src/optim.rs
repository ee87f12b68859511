//! Stochastic gradient descent with momentum and weight decay, and the
//! step learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::Archive;
use crate::nn::Module;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Heavy-ball SGD: `d = g + wd·θ`, `v ← μ·v + d`, `θ ← θ − η·v`.
/// Velocity buffers are keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, prefix: &str, module: &mut dyn Module, lr: f64) {
        let SgdConfig { momentum, weight_decay } = self.config;
        module.visit_params_mut(prefix, &mut |name, p| {
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.len()]);
            for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                let d = g + weight_decay * *w;
                *vel = momentum * *vel + d;
                *w -= lr * *vel;
            }
        });
    }

    pub fn export(&self, archive: &mut Archive) {
        for (name, v) in &self.velocity {
            archive.insert(format!("optim.{name}"), &[v.len()], v);
        }
    }

    pub fn import(archive: &Archive, config: SgdConfig) -> Self {
        let velocity = archive
            .entries
            .iter()
            .filter_map(|(k, e)| k.strip_prefix("optim.").map(|n| (n.to_string(), e.data.clone())))
            .collect();
        Sgd { config, velocity }
    }
}

/// Constant rate with a single multiplicative drop. Epochs are 1-based; the
/// drop applies from `drop_epoch + 1` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub drop_epoch: usize,
    pub factor: f64,
}

impl LrSchedule {
    pub const FULL_EPOCHS: usize = 150;
    pub const FULL_DROP: usize = 100;

    pub fn full() -> Self {
        LrSchedule {
            base_lr: 0.01,
            drop_epoch: Self::FULL_DROP,
            factor: 0.1,
        }
    }

    /// Keep the drop at the same fraction of the run as the full schedule.
    pub fn proportional(base_lr: f64, epochs: usize) -> Self {
        let drop_epoch = (epochs * Self::FULL_DROP + Self::FULL_EPOCHS / 2) / Self::FULL_EPOCHS;
        LrSchedule {
            base_lr,
            drop_epoch,
            factor: 0.1,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.drop_epoch {
            self.base_lr
        } else {
            self.base_lr * self.factor
        }
    }

    pub fn trace(&self, epochs: usize) -> Vec<f64> {
        (1..=epochs).map(|e| self.lr_at(e)).collect()
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        if epochs > 0 && self.drop_epoch >= epochs {
            return Err(Error::Config(format!(
                "lr drop epoch {} must be smaller than epochs {epochs}",
                self.drop_epoch
            )));
        }
        Ok(())
    }
}
