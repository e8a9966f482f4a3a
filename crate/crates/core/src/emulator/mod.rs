//! Time-lagged MLP emulators: one model per lag τ maps the six input
//! anomaly fields at month `t` to the three output fields at `t + τ`.

mod io;
mod loss;
mod mlp;
mod response;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use io::{load_model, save_model, train_lag_suite, LagSuite, SUITE_MANIFEST};
pub use loss::{physics_loss, LossContext};
pub use mlp::{gelu, Activation, Gradients, Layer, LossComponents, MlpModel, Standardization, TrainReport, LN_EPS};
pub use response::{pattern_correlation, unit_response};
pub use train::{evaluate, train, validation_range, Evaluation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    /// `lr_e = initial_lr · exp(−lr_decay_per_epoch · e)`.
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub lambda_precip: f64,
    pub lambda_moisture: f64,
    pub lambda_mass: f64,
    pub lambda_energy: f64,
    /// K per W m⁻²; 0 disables the radiative coupling of the energy term.
    pub c_energy: f64,
    /// Trailing fraction of the (input, target) pairs held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            initial_lr: 2e-4,
            lr_decay_per_epoch: 1e-6,
            batch_size: 32,
            hidden: vec![1024; 4],
            // penalties are in physical units squared (Pa², (mm/day)²), so the
            // budget weights start small relative to the standardized mse
            lambda_precip: 1.0,
            lambda_moisture: 0.1,
            lambda_mass: 0.01,
            lambda_energy: 0.0,
            c_energy: 0.0,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(invalid("initial_lr must be positive"));
        }
        if !self.lr_decay_per_epoch.is_finite() {
            return Err(invalid("lr_decay_per_epoch must be finite"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be positive"));
        }
        let lambdas = [self.lambda_precip, self.lambda_moisture, self.lambda_mass, self.lambda_energy];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(invalid("constraint weights must be finite and non-negative"));
        }
        if !self.c_energy.is_finite() {
            return Err(invalid("c_energy must be finite"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(invalid("val_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * (-self.lr_decay_per_epoch * epoch as f64).exp()
    }
}
