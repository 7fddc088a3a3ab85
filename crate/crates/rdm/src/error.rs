use thiserror::Error;

/// Crate-wide error type. `Config` variants map to CLI exit code 1,
/// everything else to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("NaN gradient for parameter `{name}`")]
    NanGradient { name: String },

    #[error("diffusion step {step} outside [{lo}, {hi}]")]
    StepOutOfRange { step: usize, lo: usize, hi: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("no path from {from:?} to {to:?}")]
    NoPath { from: (usize, usize), to: (usize, usize) },

    #[error("world file error: {0}")]
    World(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }

    /// Process exit code for the CLI: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
