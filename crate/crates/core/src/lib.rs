//! Temporal-relation knowledge distillation for Transformer encoders.
//!
//! A teacher and a narrower student of equal depth are compared through
//! `N x N` objects only, so no projection layers are needed between them:
//!
//! * head-averaged self-attention maps, matched with row-wise KL;
//! * temporal Gram matrices `F^T F` of every block output;
//! * cross Grams between each block's input and output.
//!
//! The crate contains the numerics those objectives need ([`numerics`]), an
//! encoder that records them ([`model`]), the objectives ([`starloss`]), a
//! small deterministic trainer ([`distill`]) and slow reference
//! implementations for testing ([`oracle`]).
//!
//! ```
//! use star_core::model::{forward_with_trace, ModelConfig, ModelWeights};
//! use star_core::numerics::Tensor;
//! use star_core::starloss::{evaluate, StarLossConfig};
//!
//! let teacher = ModelWeights::init(&ModelConfig {
//!     num_layers: 2, width: 16, num_heads: 2, ffn_width: 32, input_dim: 4, seed: 1, post_ln: false,
//! })?;
//! let student = ModelWeights::init(&ModelConfig {
//!     num_layers: 2, width: 8, num_heads: 2, ffn_width: 16, input_dim: 4, seed: 2, post_ln: false,
//! })?;
//! let x = Tensor::matrix(4, 6, (0..24).map(|i| (i as f64).sin()).collect())?;
//! let loss = evaluate(
//!     &StarLossConfig::default(),
//!     &forward_with_trace(&teacher, &x)?,
//!     &forward_with_trace(&student, &x)?,
//! )?;
//! assert!(loss.total > 0.0);
//! # Ok::<(), star_core::StarError>(())
//! ```

pub mod distill;
mod error;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod starloss;

pub use error::{Result, StarError};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/tensors.md")]
    struct Tensors;
    #[doc = include_str!("../../../book/src/encoder.md")]
    struct Encoder;
    #[doc = include_str!("../../../book/src/gram.md")]
    struct Gram;
    #[doc = include_str!("../../../book/src/attention.md")]
    struct Attention;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
    #[doc = include_str!("../../../book/src/formats.md")]
    struct Formats;
}
