use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no corrections: the correction map has no labelled pixel")]
    NoCorrections,
    #[error("click ({row}, {col}) outside a {height}x{width} image")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("empty object mask")]
    EmptyObject,
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("unknown generator `{0}`")]
    UnknownGenerator(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("click budget of {0} exhausted")]
    BudgetExhausted(usize),
    #[error("no click source available")]
    NoClickSource,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
