//! Experiment orchestration: config, pipeline runs with repeats, sweeps,
//! model comparison and plots.

pub mod compare;
pub mod config;
pub mod plot;
pub mod runner;
pub mod sweep;

use std::path::PathBuf;

use thiserror::Error;

pub use compare::{compare_models, Comparison, MetricTest, Significance};
pub use config::{ExperimentConfig, SchemaErrors, StageName};
pub use runner::{load_dataset, run_experiment, Dataset, ExperimentOutcome, RepeatSummary};
pub use sweep::{expand_sweep, run_sweep, SweepVariant};

/// Environment variable naming the dataset / checkpoint / runs cache root.
pub const CACHE_ENV: &str = "POLYCL_CACHE";

/// `$POLYCL_CACHE`, or `.polycl` under the working directory.
pub fn cache_root() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".polycl"))
}

/// Relative paths are taken relative to the cache root.
pub fn resolve_cached(path: &std::path::Path) -> PathBuf {
    if path.is_absolute() || path.exists() {
        path.to_path_buf()
    } else {
        cache_root().join(path)
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Schema(#[from] SchemaErrors),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
    #[error(transparent)]
    Phantom(#[from] crate::phantom::PhantomError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("pretrain stage: {0}")]
    Pretrain(#[from] crate::pretrain::PretrainError),
    #[error("finetune stage: {0}")]
    Finetune(#[from] crate::finetune::FinetuneError),
    #[error(transparent)]
    Checkpoint(#[from] crate::nn::CheckpointError),
    #[error(transparent)]
    Model(#[from] crate::nn::ModelError),
    #[error("refine stage: {0}")]
    Refine(#[from] crate::refine::RefineError),
    #[error("propagate stage: {0}")]
    Propagate(#[from] crate::propagate::PropagateError),
    #[error("segmenter: {0}")]
    Segmenter(#[from] crate::segmenter::SegmenterError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("no {0} available: run a finetune stage or pass a checkpoint")]
    MissingInput(&'static str),
    #[error("plot: {0}")]
    Plot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
