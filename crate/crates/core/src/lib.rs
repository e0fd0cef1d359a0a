//! Autoregressive image-model pre-training and probing on a small dense
//! tensor engine.

pub mod data;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod scalar;
pub mod trainer;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type ModelState32 = model::ModelState<f32>;
pub type ModelState64 = model::ModelState<f64>;
pub type Probe32 = model::Probe<f32>;
pub type Probe64 = model::Probe<f64>;
pub type PatchSequence32 = data::PatchSequence<f32>;
pub type PatchSequence64 = data::PatchSequence<f64>;
