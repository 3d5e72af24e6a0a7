//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by batch construction, solvers, and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("no active pairs: {0}")]
    EmptyActiveSet(String),

    #[error("embedding row {row} has norm {norm}, expected unit norm")]
    Normalization { row: usize, norm: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("undefined pair ratio: batch has no negative pairs")]
    UndefinedRatio,

    #[error("oracle failed to converge: {0}")]
    OracleFailure(String),

    #[error("non-finite {quantity} at epoch {epoch}, step {step}{}", pair_suffix(.pair))]
    NonFinite {
        quantity: String,
        epoch: usize,
        step: usize,
        pair: Option<(usize, usize)>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn pair_suffix(pair: &Option<(usize, usize)>) -> String {
    match pair {
        Some((i, j)) => format!(", pair ({i}, {j})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
