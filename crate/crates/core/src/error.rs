use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got dims {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeSpent,

    #[error("variable {0} is not recorded on this tape")]
    UnknownVar(usize),

    #[error("evaluation point lies within {margin:e} of a relu kink")]
    KinkPoint { margin: f64 },

    #[error("finite differences at the default step cannot resolve a slope of {slope:e} within tolerance")]
    FlatPoint { slope: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("organ mask is empty")]
    EmptyMask,

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("non-finite loss at step {step}: {provenance}")]
    NonFiniteLoss { step: u64, provenance: String },

    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigLine { .. } | Error::InvalidArgument(_) => 1,
            Error::NonFinite(_)
            | Error::NonFiniteLoss { .. }
            | Error::GradcheckFailed(_)
            | Error::KinkPoint { .. }
            | Error::FlatPoint { .. } => 3,
            _ => 2,
        }
    }
}
