use thiserror::Error;

use crate::model::TrainReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite (Cholesky pivot {pivot} is {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("row {row} is degenerate (norm {norm:e})")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("row {row} is not a probability vector: {reason}")]
    InvalidProbVector { row: usize, reason: String },

    #[error("training diverged at step {step}")]
    Divergence { step: usize, report: Box<TrainReport> },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
