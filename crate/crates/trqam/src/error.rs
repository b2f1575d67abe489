//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A network architecture description is unusable (empty, zero-width layers, ...).
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    /// An array argument does not have the expected length.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A gradient contained NaN or infinity; surfaced instead of being clipped away.
    #[error("non-finite gradient at flat index {index}")]
    NonFiniteGradient { index: usize },

    /// The loss graph contains an operation the reverse pass does not support.
    #[error("unsupported op in loss graph: {0}")]
    UnsupportedOp(String),

    /// An argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Forward integration produced a non-finite trajectory point.
    #[error("numerical divergence at step {step}: {what}")]
    NumericalDivergence { step: usize, what: String },

    /// The backward adjoint recursion produced a non-finite value.
    #[error("adjoint divergence at step {step}")]
    AdjointDivergence { step: usize },

    /// The trust-region parameter left its admissible range.
    #[error("trust-region domain error: {0}")]
    TrustRegion(String),

    /// Configuration parsing or validation failed.
    #[error("config error: {0}")]
    Config(String),

    /// A file had the wrong magic bytes or an unsupported format version.
    #[error("corrupt file {path}: {what}")]
    CorruptFile { path: String, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
