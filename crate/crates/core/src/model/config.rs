use serde::{Deserialize, Serialize};

use crate::error::{Result, StarError};

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    /// Channel width `d` of the residual stream.
    pub width: usize,
    pub num_heads: usize,
    pub ffn_width: usize,
    /// Channels of the externally supplied frame features.
    pub input_dim: usize,
    /// Seed for weight initialization.
    pub seed: u64,
    /// Post-LayerNorm blocks instead of the default pre-LayerNorm ones.
    #[serde(default)]
    pub post_ln: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("width", self.width),
            ("num_heads", self.num_heads),
            ("ffn_width", self.ffn_width),
            ("input_dim", self.input_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(StarError::Config(format!("{name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.num_heads) {
            return Err(StarError::Config(format!(
                "width {} is not divisible by num_heads {}",
                self.width, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.num_heads
    }

    /// HuBERT Base-sized teacher shape (12 layers, 768 wide, 12 heads).
    pub fn base_teacher(input_dim: usize, seed: u64) -> Self {
        Self {
            num_layers: 12,
            width: 768,
            num_heads: 12,
            ffn_width: 3072,
            input_dim,
            seed,
            post_ln: false,
        }
    }

    /// Full-scale student: teacher depth kept, attention width 432, FFN
    /// width 976 or 1392 in the published configurations.
    pub fn narrow_student(input_dim: usize, ffn_width: usize, seed: u64) -> Self {
        Self {
            num_layers: 12,
            width: 432,
            num_heads: 12,
            ffn_width,
            input_dim,
            seed,
            post_ln: false,
        }
    }
}
