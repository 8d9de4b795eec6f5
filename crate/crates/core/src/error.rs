use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("spin quantum number must be a non-negative half-integer, got {0}")]
    InvalidSpin(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("matrix is not Hermitian (max |H - H^dagger| = {0:.3e})")]
    NotHermitian(f64),

    #[error("no gap minimum inside the search range [{start}, {stop}] G")]
    NoMinimumInRange { start: f64, stop: f64 },

    #[error("steady state null space is defective: {0}")]
    DefectiveNullSpace(String),

    #[error("propagation failed: {0}")]
    Propagation(String),

    #[error("no population in the ground mS = 0 manifold")]
    EmptyGroundManifold,

    #[error("all fitted populations are zero")]
    ZeroPopulations,

    #[error("no transition lines to synthesize from")]
    EmptyLines,

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("linear algebra failure: {0}")]
    Linalg(#[from] ndarray_linalg::error::LinalgError),

    #[error("config error in {path}: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}

impl Error {
    /// True for bad user input (parameters, config, files) as opposed to a
    /// numerical failure of a well-posed computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpin(_)
                | Error::InvalidParameter { .. }
                | Error::Config { .. }
                | Error::InvalidSpectrum(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}
