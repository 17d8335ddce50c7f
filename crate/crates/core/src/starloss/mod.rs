//! Temporal-relation distillation objectives.
//!
//! All three objectives compare `N x N` matrices, so teacher and student
//! only have to agree on depth and sequence length, never on width:
//!
//! * [`loss_avg_attn`]: row-wise KL between head-averaged attention maps.
//! * [`loss_layer_wise`]: squared distance between temporal Gram matrices
//!   [`tgm`] of every block output, including the first block's input.
//! * [`loss_intra_layer`]: squared distance between cross Grams
//!   [`intra_tgm`] of each block's input and output.
//!
//! Every function is generic over [`Backend`](crate::numerics::Backend):
//! the same code evaluates on tensors and records a differentiable graph.

mod config;
mod gram;
mod loss;

pub use config::{LossTerm, SeqNormalization, StarLossConfig, TgmNormalization};
pub use gram::{avg_attention, channel_gram, intra_tgm, tgm};
pub use loss::{
    evaluate, loss_avg_attn, loss_intra_layer, loss_layer_wise, star_loss, star_loss_diff,
    LossBreakdown, PerTerm, StarLoss, TermValue,
};
