use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the LMEM container reader and writer.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"LMEM\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated file: {what} needs {needed} bytes, only {available} available")]
    Truncated {
        what: String,
        needed: u64,
        available: u64,
    },
    #[error("header/payload length disagreement: {0}")]
    LengthMismatch(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("target set mismatch: {0}")]
    TargetMismatch(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("clock went backwards between {0} measurements")]
    ClockFault(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps the error with a location (cell coordinates, shard id, query ordinal).
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short machine-readable category used by the CLI's error prefix.
    pub fn category(&self) -> &'static str {
        match self.root() {
            Error::ShapeMismatch { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::TargetMismatch(_) => "target_mismatch",
            Error::Divergence { .. } => "divergence",
            Error::Format(_) => "format",
            Error::UnknownId(_) => "unknown_id",
            Error::MissingFile(_) => "missing_file",
            Error::ClockFault(_) => "clock",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Context { .. } => unreachable!("root() strips context"),
        }
    }
}
