use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid mask: row {row} has no visible key")]
    InvalidMask { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tracking error: {0}")]
    Tracking(String),

    #[error("span error: {0}")]
    Span(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("modality {0} has no tokens")]
    EmptyModality(usize),

    #[error("input error: {0}")]
    Input(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("artifact mismatch: {0}")]
    Artifact(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            Error::Artifact(_) => 4,
            _ => 2,
        }
    }
}
