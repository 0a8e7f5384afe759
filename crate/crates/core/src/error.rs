use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient at node {node} ({op})")]
    NonFiniteGradient { node: usize, op: &'static str },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteParamGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("size mismatch in {what}: {left} vs {right}")]
    SizeMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("already initialized: {0}")]
    AlreadyInitialized(&'static str),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
