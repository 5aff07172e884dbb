//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CoreError {
    /// Invalid configuration value or precondition violation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array dimensions do not match what the operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// Model training failed to reach the configured quality floor.
    #[error("training failure: verification accuracy {achieved:.4} below floor {floor:.4}")]
    TrainingFailure { achieved: f64, floor: f64 },

    /// A numeric routine produced a non-finite or undecomposable result.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The UV provider found no face surface in the input.
    #[error("no face: {0}")]
    NoFace(String),

    /// An index or count is outside the legal range.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// Cross-artifact consistency check failed (e.g. mismatched model ids).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A metric is undefined for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A stored artifact has an unrecognized or incompatible format.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
