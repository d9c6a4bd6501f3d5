//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or volume extents do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or argument.
    #[error("config error: {0}")]
    Config(String),

    /// A mask label outside the supported set.
    #[error("label error: {0}")]
    Label(String),

    /// Misuse of the differentiation tape (wrong tape, non-scalar loss, ...).
    #[error("tape error: {0}")]
    Tape(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed input file.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input that this build deliberately does not handle.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A 2D slice larger than the padding target.
    #[error("size error: {0}")]
    Size(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Paired t-test with zero variance but nonzero mean difference.
    #[error("degenerate variance: sample differences are constant and nonzero")]
    DegenerateVariance,

    /// Missing or inconsistent experiment data.
    #[error("data error: {0}")]
    Data(String),

    /// A required artifact (e.g. member checkpoint) is absent.
    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
