use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("function evaluation failed at coordinate {index}: value {value}")]
    Evaluation { index: usize, value: f64 },

    #[error("training diverged ({context}): loss {loss} at update {update}")]
    Divergence {
        context: String,
        loss: f64,
        update: usize,
    },

    #[error("budget {budget} is infeasible; minimal achievable cost is {min_cost}")]
    Infeasible { budget: f64, min_cost: f64 },

    #[error("brute-force enumeration refused: {blocks} blocks exceeds the limit of {limit}")]
    TooLarge { blocks: usize, limit: usize },

    #[error("missing feature-map checkpoint for block {block} at rate {rate}")]
    MissingCheckpoint { block: usize, rate: usize },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
