//! Optimizers, learning-rate schedules, checkpoints and the pretraining loop.

mod checkpoint;
mod config;
mod engine;
mod optim;
mod schedule;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC, MOMENTUM_PREFIX};
pub use config::{OptimizerConfig, RunConfig, Seeds};
pub use engine::{pretrain, write_metrics_csv, EpochMetrics, Phase, PretrainOutput, StepRecord};
pub use optim::{adam_step, sgd_momentum_step, Adam, Optimizer, Sgd};
pub use schedule::{LrSchedule, ScheduleConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch size {batch} exceeds the {train} training images")]
    BatchTooLarge { batch: usize, train: usize },
    #[error("validation split has {0} images; at least 2 are needed")]
    ValidationTooSmall(usize),
    #[error("training diverged (loss {0})")]
    Diverged(f32),
    #[error("gradient for '{name}' has {found} values, parameter has {expected}")]
    GradShape {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint lacks tensor '{0}'")]
    MissingTensor(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Objective(#[from] crate::objectives::ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

pub type Result<T> = std::result::Result<T, TrainError>;
