use thiserror::Error;

use crate::calibration::Infeasibility;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rank {k} out of range 1..={max}")]
    RankOutOfRange { k: usize, max: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("closed-form analytics require gamma = 0, got {0}")]
    NonZeroGamma(f64),

    #[error("{operation} does not support the {variant} variant")]
    UnsupportedVariant {
        operation: &'static str,
        variant: &'static str,
    },

    #[error("numerical failure at step {step}: {detail}")]
    NumericalFailure { step: u64, detail: String },

    #[error("infeasible calibration: {0}")]
    Infeasible(Box<Infeasibility>),

    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),

    #[error("csv row {row}: {detail}")]
    Csv { row: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
