//! Error type shared across the crate, with process exit codes for the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("shape mismatch: {context}: left dims {left:?}, right dims {right:?}")]
    Shape {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Index out of range (token ids, rows, positions).
    #[error("index out of range: {context}: got {index}, bound {bound}")]
    Index {
        context: String,
        index: usize,
        bound: usize,
    },

    /// A contract precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN/Inf detected or a numerical check failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A word is not in the vocabulary.
    #[error("unknown token: {0:?}")]
    UnknownToken(String),

    /// Sequence would exceed the model's maximum length.
    #[error("capacity exceeded: {context}: length {length} > max {max}")]
    Capacity {
        context: String,
        length: usize,
        max: usize,
    },

    /// A group count does not divide the row count it must partition.
    #[error("divisibility error: {rows} rows cannot be pooled into {groups} groups")]
    Divisibility { rows: usize, groups: usize },

    /// Synthetic task generation could not produce a valid sample.
    #[error("generation error: {0}")]
    Generation(String),

    /// Malformed or incompatible serialized data.
    #[error("format error: {0}")]
    Format(String),

    /// An accuracy/error threshold was not met.
    #[error("threshold failure: {0}")]
    Threshold(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 contract, 3 numerical, 4 threshold.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            Error::Threshold(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
