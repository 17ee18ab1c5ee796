use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid anthropometric config: {0}")]
    InvalidAnthro(String),
    #[error("invalid arm model: {0}")]
    InvalidModel(String),
    #[error("inertia matrix is numerically singular (condition number {cond:e})")]
    SingularInertia { cond: f64 },

    #[error("invalid band [{lo}, {hi}] Hz for sample rate {rate} Hz")]
    InvalidBand { lo: f64, hi: f64, rate: f64 },
    #[error("invalid cutoff {cutoff} Hz for sample rate {rate} Hz")]
    InvalidCutoff { cutoff: f64, rate: f64 },
    #[error("invalid MVC value {value} for channel {channel}")]
    InvalidMvc { channel: usize, value: f64 },
    #[error("invalid downsampling factor {factor} for {len} samples")]
    InvalidFactor { factor: usize, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("series too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cache does not match network: {0}")]
    CacheMismatch(String),
    #[error("non-finite torque residual at step {step}")]
    NonFiniteResidual { step: usize },
    #[error("training diverged at epoch {epoch}: total loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("malformed checkpoint: field `{field}`: {reason}")]
    MalformedCheckpoint { field: String, reason: String },

    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("reference series has non-positive maximum {0}")]
    ZeroMax(f64),
    #[error("series has zero variance")]
    ZeroVariance,

    #[error("invalid trial spec: {0}")]
    InvalidSpec(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// True for errors caused by numerically divergent training or predictions.
    pub fn is_numeric_divergence(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::NonFiniteResidual { .. }
        )
    }
}
