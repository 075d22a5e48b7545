use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("graph is disconnected: node {from} cannot reach node {to}")]
    Disconnected { from: usize, to: usize },

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("Gauss-Newton diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("all {requested} trials failed")]
    AllTrialsFailed { requested: usize },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
