use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A primitive produced a NaN or infinity.
    #[error("non-finite value produced by `{primitive}`")]
    NumericOverflow { primitive: &'static str },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Model is in a state that does not permit the request (e.g. stale partition).
    #[error("model state error: {0}")]
    State(String),

    #[error("unsupported in {mode} mode: {what}")]
    UnsupportedMode { mode: &'static str, what: String },

    #[error("degenerate proposal: effective sample size {ess:.3} < {min}")]
    DegenerateProposal { ess: f64, min: f64 },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("incompatible checkpoint version {found} (expected {expected})")]
    Incompatible { found: u32, expected: u32 },

    #[error("training diverged at stage {stage}, step {step}: {message}")]
    Divergence {
        stage: usize,
        step: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
