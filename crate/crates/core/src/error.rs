//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("day list is not strictly increasing (index {index})")]
    NonMonotoneDays { index: usize },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("pixel {index} has no non-missing training samples")]
    EmptyTrainingPixel { index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("solver did not converge: relative residual {residual:.3e} after {iters} iterations")]
    SolverDidNotConverge { residual: f64, iters: usize },

    #[error("stratum {stratum} holds {available} pixels, {requested} requested")]
    StratumTooSmall {
        stratum: usize,
        available: usize,
        requested: usize,
    },

    #[error("infeasible transition parameters: {0}")]
    InfeasibleTransitions(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("tiff error on {path}: {source}")]
    Tiff {
        path: PathBuf,
        #[source]
        source: tiff::TiffError,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
