use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported audio format: {field} = {value}")]
    Format { field: &'static str, value: String },

    #[error("malformed WAV data: {0}")]
    Wav(String),

    #[error("input too short: {what} has {actual} samples, need at least {minimum}")]
    TooShort {
        what: &'static str,
        actual: usize,
        minimum: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any differentiable input")]
    Detached,

    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible models: {0}")]
    Incompatible(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short stable identifier, used for machine-readable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Wav(_) => "wav",
            Error::TooShort { .. } => "too_short",
            Error::Invalid(_) => "invalid",
            Error::NonFinite { .. } => "non_finite",
            Error::Shape { .. } => "shape",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::Detached => "detached",
            Error::MissingGrad(_) => "missing_grad",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Config(_) => "config",
            Error::Incompatible(_) => "incompatible",
            Error::Diverged { .. } => "diverged",
            Error::Protocol(_) => "protocol",
            Error::BadMagic(_) => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated(_) => "truncated",
            Error::KindMismatch { .. } => "kind_mismatch",
            Error::Corrupt(_) => "corrupt",
        }
    }
}
