//! Core library of the cloud-intervention emulation workbench.
//!
//! The pipeline runs from monthly gridded fields on an icosahedral mesh,
//! through anomaly extraction, to a suite of time-lagged MLP emulators whose
//! outputs are aggregated over lags to estimate the response to a
//! region-masked radiative perturbation.

pub mod anomaly;
mod binio;
pub mod dataset;
pub mod emulator;
pub mod error;
pub mod grid;
pub mod intervention;
pub mod records;
pub mod shift;
pub mod tipping;

pub use error::{Error, Result};
