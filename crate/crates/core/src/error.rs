// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised by the library and the command-line front end.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument had the wrong shape or was otherwise unusable.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// Two tensors with incompatible shapes met in an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A model or run configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A trace does not fit the architecture it is interpreted against.
    #[error("trace error: {0}")]
    Trace(String),

    /// Something was requested before the data it depends on exists,
    /// e.g. head averaging before gradients were filled.
    #[error("propagation-order error: {0}")]
    PropagationOrder(String),

    /// A finite-difference probe produced a non-finite value.
    #[error("oracle failure: {0}")]
    Oracle(String),

    /// Training diverged.
    #[error("training error: {0}")]
    Training(String),

    /// A heatmap without contrast was handed to a thresholding routine.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
