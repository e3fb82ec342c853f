//! Experiment harness: configuration, dataset generation, training,
//! evaluation, verification suites, benchmarking, and report emission.

pub mod bench;
pub mod config;
pub mod data;
pub mod eval;
pub mod report;
pub mod train;
pub mod verify;

pub use config::{ConfigError, Protocol, Sampling, TrainConfig};
pub use report::Report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset missing: {0} (run `riframe gen-data` first)")]
    DatasetMissing(String),
    #[error("non-finite loss at epoch {epoch} (value {value})")]
    NonFiniteLoss { epoch: usize, value: f64 },
    #[error("verification failed: {0}")]
    VerificationFailed(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Cloud(#[from] crate::cloud::CloudError),
    #[error(transparent)]
    Frame(#[from] crate::frames::FrameError),
    #[error(transparent)]
    Descriptor(#[from] crate::descriptors::DescriptorError),
    #[error(transparent)]
    Geometry(#[from] crate::net::GeometryError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AdError),
    #[error(transparent)]
    Checkpoint(#[from] crate::net::CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
