//! Episodic meta-training, meta-testing, baselines, basis-count sweeps and
//! checkpoints.
//!
//! A run is fully determined by its [`ExperimentConfig`]: every random
//! stream (initialization, task seeds, posterior noise, dropout, evaluation
//! episodes) is derived from the config seed.

mod checkpoint;
mod config;
mod eval;
mod model;
mod output;
mod suite;
mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ReplayRecord, RngState, CHECKPOINT_MAGIC};
pub use config::{BlobSettings, ExperimentConfig, InferenceMode, KernelKind, ModelDims, TaskFamily};
pub use eval::{evaluate, meta_test, CurveRow, EvalReport, EvalSpec, Metric, SINE_TEST_POINTS};
pub use model::{fixed_rff_basis, BatchNodes, MetaModel, Pass, FIXED_RFF_BASES};
pub use output::{write_curve_csv, write_metrics, write_report, write_sweep_csv, ReportFile};
pub use suite::{gradcheck_suite, GradCheckEntry, GRADCHECK_TOLERANCE};
pub use train::{meta_train, meta_train_observed, meta_train_on, replay_batch, run_baseline, run_baseline_observed, sweep_basis_count, LogRecord, SweepRow, TrainOutcome};

use crate::autodiff::GraphError;
use crate::embedding::EmbeddingError;
use crate::rng::derive_seed;
use crate::tasks::{self, DatasetSplit, TaskError};

/// Environment variable naming the dataset root.
pub const DATA_ENV: &str = "METAVRF_DATA";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset missing: {0}")]
    DatasetMissing(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("non-finite loss at iteration {iteration} (task seed {task_seed})")]
    NonFiniteLoss {
        iteration: usize,
        task_seed: u64,
        diagnostic: Option<PathBuf>,
    },
    #[error("checkpoint was trained on {trained:?} tasks, evaluation asked for {requested:?}")]
    FamilyMismatch { trained: TaskFamily, requested: TaskFamily },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Task source for a run.
#[derive(Clone, Debug)]
pub enum Dataset {
    Sine,
    Classes(DatasetSplit),
}

/// The dataset root: the config value when set, otherwise `METAVRF_DATA`.
pub fn data_root(config: &ExperimentConfig) -> Option<PathBuf> {
    config
        .data_root
        .clone()
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
}

/// Builds or loads the tasks of a run. Omniglot is read from
/// `<root>/omniglot` when that directory exists, otherwise from `<root>`.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, RunError> {
    let seed = derive_seed(config.seed, &[model::stream::DATA]);
    match config.family {
        TaskFamily::Sine => Ok(Dataset::Sine),
        TaskFamily::Blobs => {
            let b = &config.blobs;
            Ok(Dataset::Classes(tasks::make_blob_dataset(b.classes, b.dim, b.separation, seed)))
        }
        TaskFamily::Omniglot => {
            let root = data_root(config).ok_or_else(|| {
                RunError::DatasetMissing(format!("omniglot needs --data or {DATA_ENV}"))
            })?;
            let nested = root.join("omniglot");
            let dir = if nested.is_dir() { nested } else { root };
            if !dir.is_dir() {
                return Err(RunError::DatasetMissing(format!("{} is not a directory", dir.display())));
            }
            Ok(Dataset::Classes(tasks::load_omniglot(&dir, seed)?))
        }
    }
}
