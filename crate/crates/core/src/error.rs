//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("state lookup out of range: id {id} with {count} states")]
    Lookup { id: usize, count: usize },

    #[error("dataset format error in `{path}`: {reason}")]
    DatasetFormat { path: String, reason: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("density field empty: no grid cell exceeded threshold {threshold}")]
    EmptyField { threshold: f64 },

    #[error("training aborted at iteration {iteration}: {reason}")]
    TrainAbort { iteration: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn dataset(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::DatasetFormat {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
