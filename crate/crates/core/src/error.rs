use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A hyper-parameter or argument is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An iterative routine did not converge.
    #[error("numeric error after {iterations} iterations: {message}")]
    Numeric { message: String, iterations: usize },

    /// An operation was invoked in the wrong order (e.g. backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// A binary file could not be parsed.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Experiment configuration failed validation; `path` names the field.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A failure during training, annotated with the step at which it happened.
    #[error("at step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn at_step(self, step: u64) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}
