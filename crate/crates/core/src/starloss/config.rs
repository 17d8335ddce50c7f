use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, StarError};

/// Scaling applied to every temporal Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TgmNormalization {
    /// `F^T F` as is.
    None,
    /// `F^T F / d`. Keeps teacher and student Gram entries on one scale when
    /// their widths differ.
    ByChannels,
}

/// Scaling applied to each summed loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqNormalization {
    /// Plain sums over layers and time steps.
    None,
    /// Divide by the number of summed entries: `L*N` rows for the attention
    /// term, `(L+1)*N^2` and `L*N^2` Gram entries for the two Gram terms.
    BySteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    AvgAttn,
    LayerWise,
    IntraLayer,
}

impl LossTerm {
    pub const ALL: [LossTerm; 3] = [LossTerm::AvgAttn, LossTerm::LayerWise, LossTerm::IntraLayer];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::AvgAttn => "avg_attn",
            LossTerm::LayerWise => "layer_wise",
            LossTerm::IntraLayer => "intra_layer",
        }
    }
}

/// Which objectives are active and how they are weighted and scaled.
///
/// The default is the layer-wise plus intra-layer Gram combination with
/// unit weights, channel-normalized Grams and step-normalized sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StarLossConfig {
    pub enable_avg_attn: bool,
    pub enable_layer_wise: bool,
    pub enable_intra_layer: bool,
    pub weight_avg_attn: f64,
    pub weight_layer_wise: f64,
    pub weight_intra_layer: f64,
    pub tgm_normalization: TgmNormalization,
    pub seq_normalization: SeqNormalization,
    /// Baseline: restrict the attention term to the last block only.
    /// Accepted for evaluation, rejected by the trainer.
    pub avg_attn_last_layer_only: bool,
}

impl Default for StarLossConfig {
    fn default() -> Self {
        Self {
            enable_avg_attn: false,
            enable_layer_wise: true,
            enable_intra_layer: true,
            weight_avg_attn: 1.0,
            weight_layer_wise: 1.0,
            weight_intra_layer: 1.0,
            tgm_normalization: TgmNormalization::ByChannels,
            seq_normalization: SeqNormalization::BySteps,
            avg_attn_last_layer_only: false,
        }
    }
}

impl StarLossConfig {
    /// Default scaling with exactly `terms` enabled at weight 1.
    pub fn with_terms(terms: &[LossTerm]) -> Self {
        Self {
            enable_avg_attn: terms.contains(&LossTerm::AvgAttn),
            enable_layer_wise: terms.contains(&LossTerm::LayerWise),
            enable_intra_layer: terms.contains(&LossTerm::IntraLayer),
            ..Self::default()
        }
    }

    /// The same terms and weights with both normalizations off, so every
    /// term is the plain printed sum.
    pub fn paper_literal(&self) -> Self {
        Self {
            tgm_normalization: TgmNormalization::None,
            seq_normalization: SeqNormalization::None,
            ..self.clone()
        }
    }

    pub fn is_enabled(&self, term: LossTerm) -> bool {
        match term {
            LossTerm::AvgAttn => self.enable_avg_attn,
            LossTerm::LayerWise => self.enable_layer_wise,
            LossTerm::IntraLayer => self.enable_intra_layer,
        }
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::AvgAttn => self.weight_avg_attn,
            LossTerm::LayerWise => self.weight_layer_wise,
            LossTerm::IntraLayer => self.weight_intra_layer,
        }
    }

    pub fn enabled_terms(&self) -> Vec<LossTerm> {
        LossTerm::ALL.into_iter().filter(|t| self.is_enabled(*t)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled_terms().is_empty() {
            return Err(StarError::Config("at least one loss term must be enabled".into()));
        }
        for term in LossTerm::ALL {
            let w = self.weight(term);
            if !w.is_finite() || w < 0.0 {
                return Err(StarError::Config(format!(
                    "weight_{} must be finite and non-negative, got {w}",
                    term.name()
                )));
            }
        }
        Ok(())
    }

    /// Short content hash identifying this configuration in reports.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hex::encode(&hash[..8])
    }
}
