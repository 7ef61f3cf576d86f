//! Decoder-only transformer runtime with attention read/scale hooks.

pub mod config;
pub mod container;
mod hooks;
pub mod math;
mod trace;
mod transformer;
mod weights;

pub use config::{ModelConfig, PositionEncoding};
pub use container::{Dtype, Tensor, TensorStore};
pub use hooks::{InterventionHooks, ScalingHookSpec};
pub use trace::AttentionTrace;
pub use transformer::{ForwardOptions, ForwardOutput, Generation, KvCache, LogitRows, Transformer};
pub use weights::{load_model, LayerWeights, ModelWeights};
