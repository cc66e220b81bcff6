use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Head,
}

/// Cosine annealing from a per-group initial rate down to a shared floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-4,
            lr_head: 1e-3,
            lr_min: 1e-6,
            total_steps: 1000,
        }
    }
}

impl Schedule {
    pub fn initial(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Head => self.lr_head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_head", self.lr_head),
            ("lr_min", self.lr_min),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if self.lr_min > self.lr_backbone.min(self.lr_head) {
            return Err(Error::invalid("lr_min exceeds an initial learning rate"));
        }
        Ok(())
    }

    /// Fraction of the annealed span remaining at step `t`: 1 at the start,
    /// 0 at the end.
    pub fn cosine_factor(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::invalid(format!(
                "step {t} beyond schedule length {}",
                self.total_steps
            )));
        }
        Ok(0.5 * (1.0 + (PI * t as f64 / self.total_steps as f64).cos()))
    }
}

/// `lr_min + (lr0 − lr_min)·(1 + cos(πt/T))/2`, exact at both endpoints.
pub fn cosine_lr(t: usize, s: &Schedule, group: ParamGroup) -> Result<f64> {
    let factor = s.cosine_factor(t)?;
    let lr0 = s.initial(group);
    Ok(if t == 0 {
        lr0
    } else if t == s.total_steps {
        s.lr_min
    } else {
        s.lr_min + (lr0 - s.lr_min) * factor
    })
}
