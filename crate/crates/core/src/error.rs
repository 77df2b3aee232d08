//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("agent {agent}: {field} has length {got}, expected {expected}")]
    Dimension {
        agent: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid constants: {0}")]
    Constants(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },

    #[error("R = {r} is below the admissible minimum {min_r} (psi/epsilon times the disturbance bound)")]
    RadiusTooSmall { r: f64, min_r: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
