use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Step-decay SGD schedule: `lr = base / factor^floor(epoch / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_period_epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, decay_factor: 5.0, decay_period_epochs: 50 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("sgd config", format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(self.decay_factor > 1.0 && self.decay_factor.is_finite()) {
            return Err(Error::invalid("sgd config", format!("decay factor {} must be > 1", self.decay_factor)));
        }
        if self.decay_period_epochs == 0 {
            return Err(Error::invalid("sgd config", "decay period must be at least one epoch"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.decay_period_epochs) as i32;
        self.learning_rate / self.decay_factor.powi(decays)
    }
}

/// `p ← p − lr·g` for every parameter. Every parameter must carry a gradient.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid("sgd_step", format!("learning rate {lr} must be finite and non-negative")));
    }
    if let Some(name) = params.iter().find(|(_, t)| t.grad().is_none()).map(|(n, _)| n.to_string()) {
        return Err(Error::invalid("sgd_step", format!("parameter '{name}' has no gradient")));
    }
    for (_, t) in params.iter_mut() {
        let g = t.grad().expect("checked above").to_vec();
        for (p, gi) in t.data_mut().iter_mut().zip(&g) {
            *p -= lr * gi;
        }
    }
    Ok(())
}
