//! Continual learning over precomputed feature vectors with generative latent
//! replay: per-domain, per-class Gaussian mixtures stand in for past data.

mod codec;

pub mod baselines;
pub mod error;
pub mod experiment;
pub mod gmm;
pub mod metrics;
pub mod nnet;
pub mod replay;
pub mod streams;
pub mod tensor;

pub use codec::write_atomic;
pub use error::{Error, Result};
pub use gmm::{select_k, CovarianceKind, CovariancePolicy, EmConfig, FitReport, GmmGenerator};
pub use metrics::{AccuracyMatrix, MetricsSummary};
pub use nnet::{AdamWConfig, AdamWState, MlpHead};
pub use replay::{compose_batch, run_glrcl, train_session, update_pool, GeneratorPool, ReplayConfig, TrainConfig};
pub use streams::{LabeledFeatureBatch, SyntheticShiftSpec, TaskDataset, TaskStream};
pub use tensor::{DenseMatrix, Rng};
