use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The CLI maps each variant family onto a stable process exit code, see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("invalid synthetic data spec: {0}")]
    Spec(String),

    #[error("finite-difference oracle failed: {0}")]
    Oracle(String),

    #[error("malformed input {}: {msg}", path.as_ref().map(|p| p.display().to_string()).unwrap_or_default())]
    Input { path: Option<PathBuf>, msg: String },

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence {
        epoch: usize,
        batch: usize,
        partial: Box<crate::train::PartialRun>,
    },

    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input {
            path: None,
            msg: msg.into(),
        }
    }

    pub(crate) fn with_path(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Error::Input { msg, .. } => Error::Input {
                path: Some(path.into()),
                msg,
            },
            other => other,
        }
    }

    /// Process exit code for this error: 2 input, 3 statistics, 4 divergence,
    /// 5 gradient check.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stats(_) => 3,
            Error::Divergence { .. } => 4,
            Error::GradCheck(_) => 5,
            _ => 2,
        }
    }
}
