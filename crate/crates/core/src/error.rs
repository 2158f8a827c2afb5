use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong in the library.
///
/// The variants are grouped so that a front end can map them onto a small set
/// of process exit codes (see [`Error::kind`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("kernel radius {radius} holds only {mass:.4} of the PSF mass (need 0.99)")]
    Truncation { radius: usize, mass: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    TrainingDivergence { iteration: u64, detail: String },

    #[error("integration diverged at step {step} of {steps}")]
    IntegrationDivergence { step: usize, steps: usize },

    #[error("tile ({row}, {col}) failed: {source}")]
    Tile {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Divergence,
    Incompatible,
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::TrainingDivergence { .. } | Error::IntegrationDivergence { .. } => {
                ErrorKind::Divergence
            }
            Error::Incompatible(_) => ErrorKind::Incompatible,
            Error::Tile { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }
}
