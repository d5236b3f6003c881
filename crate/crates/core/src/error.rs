use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or layouts disagree (model vs batch, mask vs architecture, ...).
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    /// A consensus or budget constraint cannot be satisfied.
    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("protocol error at byte {offset}: {message}")]
    Protocol { offset: usize, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged on node {node}: {message}")]
    Divergence { node: usize, message: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("round {round}: {source}")]
    Round {
        round: u32,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn protocol(offset: usize, message: impl Into<String>) -> Self {
        Error::Protocol {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn in_round(self, round: u32) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        }
    }
}
