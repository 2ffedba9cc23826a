use std::path::PathBuf;

use trajvid_core::trajectory::TrajectoryError;
use trajvid_core::CoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("tensor backend: {0}")]
    Candle(#[from] candle_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("image codec: {0}")]
    Image(String),
    #[error("invalid trajectory: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("trajectory json: {0}")]
    TrajectorySchema(String),
    #[error("config: {0}")]
    Config(String),
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("model shape mismatch: {0}")]
    ModelShapeMismatch(String),
    #[error("conditioning scale mismatch: expected scales {expected:?}, got {got:?}")]
    ScaleMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("misaligned resolution: {0}")]
    Misaligned(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("clip has {available} frames, {requested} requested")]
    TooFewFrames { requested: usize, available: usize },
    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
