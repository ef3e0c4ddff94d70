use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: {len} samples, need at least {needed}")]
    SignalTooShort { len: usize, needed: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite sample at index {0}")]
    NonFinite(usize),

    #[error("sample rate mismatch: expected {expected} Hz, found {found} Hz")]
    SampleRateMismatch { expected: u32, found: u32 },

    #[error("resampling ratio {0} outside supported range [0.999, 1.001]")]
    RatioOutOfRange(f64),

    #[error("position {0:?} lies outside the room")]
    OutsideRoom([f64; 3]),

    #[error("scene placement failed after {0} rejections")]
    PlacementFailed(usize),

    #[error("zero-energy source: {0}")]
    ZeroEnergy(&'static str),

    #[error("non-finite generalized eigenpair at frequency bin {0}")]
    NonFiniteEigen(usize),

    #[error("noise covariance not positive definite at frequency bin {0}")]
    NotPositiveDefinite(usize),

    #[error("node {0}: {1}")]
    Node(usize, String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by an invalid configuration rather than by data.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidArgument(_) | Error::RatioOutOfRange(_)
        )
    }
}
