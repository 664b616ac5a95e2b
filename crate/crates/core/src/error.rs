use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("too few valid UV pixels: {found} < {required}")]
    TooFewValidPixels { found: usize, required: usize },

    #[error("no valid tracks")]
    NoValidTracks,

    #[error("degenerate landmark configuration: {0}")]
    DegenerateLandmarks(String),

    #[error("shape basis is rank deficient: {0}")]
    RankDeficient(String),

    #[error("optimization diverged: loss {loss} exceeds {limit}")]
    Divergence { loss: f64, limit: f64 },

    #[error("scene generation failed: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this error: 3 for input/format problems, 4 for
    /// numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Divergence { .. } => 4,
            _ => 3,
        }
    }
}
