//! Optimization, training loops, checkpoints and metric streams.

mod checkpoint;
mod metrics;
mod optim;
mod pretrain;
mod probe;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION,
};
pub use metrics::{read_metrics, MetricRecord, MetricsWriter};
pub use optim::{adamw_step, clip_gradients, global_norm, lr_schedule, AdamWConfig, OptimizerState, ScheduleConfig};
pub use pretrain::{
    chunk_diagnostics, pretrain_loop, ChunkDiagnostics, DataConfig, ObjectiveConfig, PretrainConfig, PretrainOutcome,
    PretrainRun, TrainingConfig,
};
pub use probe::{probe_train_loop, LayerSelect, LrResult, ProbeConfig, ProbeReport};

use crate::data::DataError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::objectives::ObjectiveError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("label {label} outside {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint payload: {0}")]
    CorruptPayload(String),
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
