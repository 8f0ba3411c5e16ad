//! Experiment plumbing: datasets, configuration files, training runs with
//! CSV traces, hyperparameter tuning, and the verification suites.

mod config;
mod data;
mod experiment;
mod rates;
mod tune;
pub mod verify;

pub use config::{
    parse_schedule, DataSource, ExperimentConfig, Ini, NetworkPreset, RatesConfig, Schedule, TuneConfig, SEED_ENV,
};
pub use data::{
    gen_synthetic, load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, Dataset, Labels,
    Teacher, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use experiment::{
    build_network, desk3c1f, dump_block, evaluate, prepare_data, run_experiment, run_experiment_on, EpochRecord,
    RunTrace, TRACE_HEADER,
};
pub use rates::{rates_network, run_rates, run_rates_seed, RatesOutcome};
pub use tune::{grid_preset, parallel_map, tune, HyperGrid, TuneResult};

use crate::convlab::ConvError;
use crate::fisher::FisherError;
use crate::net::NetError;
use crate::optim::OptimError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: byte {offset}: {msg}")]
    Format { path: String, offset: u64, msg: String },
    #[error("config field `{field}`{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { field: String, line: Option<usize>, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Fisher(#[from] FisherError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Conv(#[from] ConvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{context}: {inner}")]
    Context { context: String, inner: Box<HarnessError> },
}

impl HarnessError {
    pub(crate) fn field(field: impl Into<String>, msg: impl Into<String>) -> Self {
        HarnessError::Config { field: field.into(), line: None, msg: msg.into() }
    }

    pub(crate) fn context(self, context: impl Into<String>) -> Self {
        HarnessError::Context { context: context.into(), inner: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
