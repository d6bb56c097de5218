use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the routing, fusion and training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("not found: {0}")]
    Lookup(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("rank mismatch: expected {expected}, got {found}")]
    Rank { expected: usize, found: usize },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f32 },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid plan: {0}")]
    Plan(String),

    #[error("no adapter registered for task label `{label}`")]
    Routing { label: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("measurement error: {0}")]
    Measurement(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code for the error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::Contract(_) => "E_CONTRACT",
            Error::Lookup(_) => "E_LOOKUP",
            Error::Conflict(_) => "E_CONFLICT",
            Error::Rank { .. } => "E_RANK",
            Error::Divergence { .. } => "E_DIVERGENCE",
            Error::Data(_) => "E_DATA",
            Error::Plan(_) => "E_PLAN",
            Error::Routing { .. } => "E_ROUTING",
            Error::Config(_) => "E_CONFIG",
            Error::Input(_) => "E_INPUT",
            Error::Measurement(_) => "E_MEASUREMENT",
            Error::Parse { .. } => "E_PARSE",
            Error::Version { .. } => "E_VERSION",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
