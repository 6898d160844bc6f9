use thiserror::Error;

use crate::gmm::GmmError;
use crate::metrics::MetricsError;
use crate::nnet::NnetError;
use crate::streams::StreamError;
use crate::tensor::TensorError;

/// Errors surfaced by training runs and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("domain {0} already has generators in the pool")]
    DuplicateDomain(u32),
    #[error("pool already holds a generator for domain {domain}, class {class}")]
    DuplicateKey { domain: u32, class: u32 },
    #[error("malformed pool file: {0}")]
    MalformedPool(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
