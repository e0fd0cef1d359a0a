//! Bias-free pre-norm ViT trunk, prediction heads, probes and LoRA adapters.

mod config;
mod lora;
mod network;
mod params;
mod posembed;
mod probe;

pub use config::{HeadKind, ModelConfig, ParamCounts, ParamKind, ParamSpec, TargetKind, DEFAULT_HEAD_DIM, MLP_RATIO};
pub use lora::{attach_lora, LoraConfig, LoraTarget};
pub use network::{
    check_plans, forward_pixel_head, forward_trunk, head_graph, init_model, predict, trunk_graph, ModelSpec,
    ModelState, TrunkGraph, TrunkOutput,
};
pub use params::{trunc_normal, Bound, Param, ParamStore, INIT_STD};
pub use posembed::{sinusoidal_pos_embed, slot_pos_embed};
pub use probe::{attentive_pool, Probe, ProbeKind};

use crate::data::DataError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("LoRA adapters are already attached")]
    LoraAlreadyAttached,
    #[error("plan/sequence mismatch: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
}
