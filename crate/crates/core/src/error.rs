use std::io;

use thiserror::Error;

use crate::tensor::Shape;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands (or an operand and a kernel) disagree on dimensions.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape { op: &'static str, lhs: Shape, rhs: Shape },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An architecture description is malformed or inconsistent.
    #[error("architecture error: {0}")]
    Spec(String),

    /// A checkpoint file could not be parsed, or does not match a model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Invalid configuration value.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: Shape, rhs: Shape) -> Self {
        Error::Shape { op, lhs, rhs }
    }

    /// Stable machine-readable code, used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::Contract(_) => "E_CONTRACT",
            Error::Spec(_) => "E_ARCH",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::Config(_) => "E_CONFIG",
            Error::Parse { .. } => "E_PARSE",
            Error::Io(_) => "E_IO",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
