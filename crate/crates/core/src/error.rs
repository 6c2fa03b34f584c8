use thiserror::Error;

use crate::trainer::TrainTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, counts or missing blocks that violate an operation's preconditions.
    #[error("invalid input: {0}")]
    Input(String),

    /// A Gram or moment matrix that cannot be factorized without a positive ridge.
    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training produced a non-finite or exploding loss. The partial trace is kept.
    #[error("training diverged at step {step}")]
    Divergence { step: usize, trace: Box<TrainTrace> },

    #[error("every run diverged for sweep value {value}")]
    Sweep { value: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
