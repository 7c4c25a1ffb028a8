//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Errors carry enough context
//! (operation name, offending parameter or file) to be actionable from a CLI
//! message without a debugger.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Structurally invalid request (bad dimension, empty task list, ...).
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: String, detail: String },

    /// A numeric procedure could not produce a meaningful result
    /// (degenerate contrastive batch, unfittable spectrum, ...).
    #[error("{context}: {detail}")]
    Numeric { context: String, detail: String },

    /// Configuration file rejected.
    #[error("config error in {path}: {detail}")]
    Config { path: String, detail: String },

    /// Checkpoint file rejected.
    #[error("checkpoint error in {path}: {detail}")]
    Checkpoint { path: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn invalid(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable category for CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::Numeric { .. } => "numeric",
            Error::Config { .. } => "config",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}
