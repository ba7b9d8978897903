//! Experiment orchestration: teacher pretraining, student distillation under
//! four methods, ablation grids, checkpoint evaluation, and map export.
//!
//! Every run is a pure function of `(config, seed)`: repeated invocations
//! produce byte-identical metric CSVs. Independent runs (grid points, seeds)
//! may execute on parallel worker threads; within one run, training is
//! single-threaded.

mod ablate;
mod cache;
mod config;
mod export;
mod parallel;
mod train;

pub use ablate::{ablate, AblationPoint, AblationTable, GridAxis};
pub use cache::TeacherCache;
pub use config::{ExperimentConfig, Method, OptimizerConfig, ScheduleSection};
pub use export::{export_maps, ExportedSample};
pub use parallel::run_parallel;
pub use train::{
    distill, evaluate_checkpoint, pretrain_teacher, EvalSummary, RunRecord, TrainLogRow,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    InvalidConfig(String),
    #[error("could not read config {path}: {detail}")]
    ConfigRead { path: String, detail: String },
    #[error("training diverged (non-finite loss) at iteration {iter}")]
    Diverged { iter: u64 },
    #[error("teacher checkpoint not found at {0}; run pretrain-teacher first")]
    MissingTeacher(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Distill(#[from] crate::distill::DistillError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
