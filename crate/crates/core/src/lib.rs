//! Simulation, closed-form analytics and calibration for rank-based Atlas
//! models, with tools to classify and reproduce Zipf's-law behaviour.
//!
//! - [`model`]: model families, validation, ranking.
//! - [`analytics`]: steady-state gaps, slopes, Zipf classification.
//! - [`simulator`]: Monte Carlo steady-state sampling.
//! - [`estimators`]: distribution curves, slope fits, exponentiality tests.
//! - [`calibration`]: fitting rank parameters to target curves.
//! - [`size_effect`]: rank-conditioned expected returns.
//! - [`cli`]: the `zipf-atlas` command line.

pub mod analytics;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod model;
pub mod simulator;
pub mod size_effect;

pub use error::{Error, Result};
pub use model::{ModelSpec, RankedWeights, SystemState};
