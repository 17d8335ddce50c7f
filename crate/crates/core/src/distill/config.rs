use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, StarError};
use crate::model::ModelConfig;
use crate::starloss::StarLossConfig;

use super::data::SyntheticConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSource {
    /// Randomly initialized from the config's seed.
    Config(ModelConfig),
    /// Checkpoint directory (manifest + STAR files).
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// STAR tensor files, each `input_dim x N`.
    Files(Vec<PathBuf>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn default_lr() -> f64 {
    1e-3
}

fn one() -> usize {
    1
}

fn default_divergence_factor() -> f64 {
    1e6
}

/// A complete description of one distillation run. Parsed from JSON with
/// unknown keys rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub teacher: TeacherSource,
    /// Masked-reconstruction steps applied to the teacher before
    /// distillation, so its features are not purely random.
    #[serde(default)]
    pub teacher_warmup_steps: usize,
    pub student: ModelConfig,
    #[serde(default)]
    pub loss: StarLossConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Micro-batches per optimizer step; the effective batch is
    /// `batch_size * accumulate_steps`.
    #[serde(default = "one")]
    pub accumulate_steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    pub data: DataSource,
    pub run_seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Adds `wall_ms` to metrics records. Off by default so metrics files
    /// are reproducible byte for byte.
    #[serde(default)]
    pub record_timing: bool,
    /// Abort when the step loss exceeds this multiple of the first step's
    /// loss (or of 1.0, whichever is larger).
    #[serde(default = "default_divergence_factor")]
    pub divergence_factor: f64,
}

impl DistillConfig {
    /// The desk-scale reference run: 2 blocks, teacher width 16 with 2
    /// heads, student width 8, 12-step sequences from a 64-sequence
    /// synthetic corpus, 500 steps at lr 1e-3 with the cosine schedule and
    /// the default loss.
    pub fn toy() -> Self {
        let teacher = ModelConfig {
            num_layers: 2,
            width: 16,
            num_heads: 2,
            ffn_width: 32,
            input_dim: 8,
            seed: 1,
            post_ln: false,
        };
        let student = ModelConfig {
            width: 8,
            ffn_width: 16,
            seed: 2,
            ..teacher.clone()
        };
        Self {
            teacher: TeacherSource::Config(teacher),
            teacher_warmup_steps: 0,
            student,
            loss: StarLossConfig::default(),
            steps: 500,
            batch_size: 4,
            accumulate_steps: 1,
            lr: default_lr(),
            warmup_steps: 0,
            adam: AdamConfig::default(),
            clip_grad_norm: None,
            data: DataSource::Synthetic(SyntheticConfig::new(8, 12, 64, 3)),
            run_seed: 4,
            out_dir: None,
            record_timing: false,
            divergence_factor: default_divergence_factor(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| StarError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks everything that can be checked without loading a teacher
    /// checkpoint.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        if let TeacherSource::Config(t) = &self.teacher {
            t.validate()?;
            check_pair(t, &self.student)?;
        }
        self.loss.validate()?;
        if self.loss.avg_attn_last_layer_only {
            return Err(StarError::Config(
                "avg_attn_last_layer_only is an evaluation baseline, not a training objective".into(),
            ));
        }
        if self.steps == 0 {
            return Err(StarError::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 || self.accumulate_steps == 0 {
            return Err(StarError::Config("batch_size and accumulate_steps must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(StarError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        // negated comparisons so that NaN is rejected too
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(StarError::Config(format!("invalid adam parameters {a:?}")));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(StarError::Config(format!("clip_grad_norm must be positive, got {c}")));
            }
        }
        if !(self.divergence_factor > 1.0) {
            return Err(StarError::Config("divergence_factor must exceed 1".into()));
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                s.validate()?;
                if s.input_dim != self.student.input_dim {
                    return Err(StarError::Config(format!(
                        "data input_dim {} != student input_dim {}",
                        s.input_dim, self.student.input_dim
                    )));
                }
                if s.corpus_size < self.batch_size {
                    return Err(StarError::Config(format!(
                        "corpus_size {} is smaller than batch_size {}",
                        s.corpus_size, self.batch_size
                    )));
                }
            }
            DataSource::Files(files) => {
                if files.len() < self.batch_size {
                    return Err(StarError::Config(format!(
                        "{} data files is fewer than batch_size {}",
                        files.len(),
                        self.batch_size
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Teacher and student must agree on depth (block-to-block matching) and
/// on input features.
pub fn check_pair(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    if teacher.num_layers != student.num_layers {
        return Err(StarError::Config(format!(
            "teacher num_layers {} != student num_layers {}",
            teacher.num_layers, student.num_layers
        )));
    }
    if teacher.input_dim != student.input_dim {
        return Err(StarError::Config(format!(
            "teacher input_dim {} != student input_dim {}",
            teacher.input_dim, student.input_dim
        )));
    }
    Ok(())
}
