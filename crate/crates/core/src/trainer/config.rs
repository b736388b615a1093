use serde::{Deserialize, Serialize};

use crate::error::{Result, WishError};

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_nce: f64,
    pub lambda_match: f64,
    pub lambda_contact: f64,
    /// Percentile used for the dynamic contact threshold.
    pub gamma: f64,
    /// Focal modulating exponent.
    pub theta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Contrastive temperature (fixed, not learned).
    pub tau: f64,
    pub seed: u64,
    /// Adapter weights start uniform in `(-init_scale, init_scale)`.
    pub init_scale: f64,
    pub enable_nce: bool,
    pub enable_contact: bool,
    pub enable_match: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_nce: 0.2,
            lambda_match: 0.1,
            lambda_contact: 1.0,
            gamma: 0.3,
            theta: 2.0,
            lr: 4e-6,
            epochs: 15,
            batch_size: 64,
            tau: 0.07,
            seed: 0,
            init_scale: 0.01,
            enable_nce: true,
            enable_contact: true,
            enable_match: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(WishError::Config(msg.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.theta >= 0.0) || !self.theta.is_finite() {
            return bad("theta must be a finite value >= 0");
        }
        for (name, l) in [
            ("lambda_nce", self.lambda_nce),
            ("lambda_match", self.lambda_match),
            ("lambda_contact", self.lambda_contact),
        ] {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(WishError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad("tau must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return bad("init_scale must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        Ok(())
    }
}
