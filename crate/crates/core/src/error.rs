use std::fmt;

use crate::numkit::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration or arguments.
    Usage,
    /// Malformed or unreadable files.
    Data,
    /// NaN, singular matrices, failed inversions.
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("singular matrix {matrix}: pivot {pivot} has magnitude {magnitude:e}")]
    SingularMatrix {
        matrix: usize,
        pivot: usize,
        magnitude: f64,
    },
    #[error("singular attention block: sample {sample}, patch {patch}, head {head}, pivot {pivot}")]
    SingularBlock {
        sample: usize,
        patch: usize,
        head: usize,
        pivot: usize,
    },
    #[error("attention scale underflow at sample {sample}, position ({row}, {col})")]
    ScaleUnderflow { sample: usize, row: usize, col: usize },
    #[error("mixture inversion failed at element {index}: {detail}")]
    Bisection { index: usize, detail: String },
    #[error("backward: {0}")]
    Backward(String),
    #[error("layer {0} used in the inverse direction before initialization")]
    NotInitialized(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint tensor {name}: expected shape {expected}, found {found}")]
    TensorShape {
        name: String,
        expected: Shape,
        found: Shape,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: u64 },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::ShapeMismatch { .. } => ErrorClass::Usage,
            Error::Format(_) | Error::TensorShape { .. } | Error::Io { .. } => ErrorClass::Data,
            _ => ErrorClass::Numerical,
        }
    }

    pub(crate) fn io(path: impl fmt::Display, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_string(),
            source,
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}
