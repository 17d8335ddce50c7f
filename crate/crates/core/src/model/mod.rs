//! A small multi-head Transformer encoder whose forward pass keeps every
//! quantity the distillation losses read: the feature sequence entering and
//! leaving each block, and every head's attention map.

pub mod checkpoint;
mod config;
mod encoder;
mod params;

pub use config::ModelConfig;
pub use encoder::{attention_map, forward, forward_diff, forward_with_trace, ForwardTrace};
pub use params::{expected_shapes, param_names, LayerParams, ModelWeights, Params};
