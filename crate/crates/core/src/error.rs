use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}: {message}")]
    Bundle { file: PathBuf, message: String },

    #[error("{file}: {source}")]
    Io {
        file: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("size {size} exceeds dense cap {cap}")]
    CapExceeded { size: usize, cap: usize },

    #[error("eigendecomposition failed: {0}")]
    Convergence(String),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

/// Broad failure categories, used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numeric,
    ResourceCap,
}

impl Error {
    pub fn bundle(file: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Bundle {
            file: file.into(),
            message: message.into(),
        }
    }

    pub fn io(file: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            file: file.into(),
            source,
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Bundle { .. } | Error::Io { .. } | Error::Invalid(_) | Error::Json(_) => {
                ErrorKind::Validation
            }
            Error::Shape { .. }
            | Error::NonFinite { .. }
            | Error::Diverged { .. }
            | Error::Convergence(_) => ErrorKind::Numeric,
            Error::CapExceeded { .. } => ErrorKind::ResourceCap,
        }
    }
}

impl ErrorKind {
    /// Process exit code: 2 validation, 3 numeric, 4 resource cap.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 2,
            ErrorKind::Numeric => 3,
            ErrorKind::ResourceCap => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Numeric => "numeric",
            ErrorKind::ResourceCap => "resource_cap",
        }
    }
}
