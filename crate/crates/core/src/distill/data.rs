//! Training sequences: a seeded synthetic corpus standing in for
//! pre-extracted speech frame features, or STAR files from disk.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StarError};
use crate::numerics::{io, Tensor};

fn default_noise() -> f64 {
    0.1
}

fn default_units() -> usize {
    8
}

fn default_min_segment() -> usize {
    2
}

fn default_max_segment() -> usize {
    6
}

/// Piecewise-constant "unit" sequences plus Gaussian noise.
///
/// A shared codebook of `num_units` Gaussian vectors plays the role of
/// acoustic units. Each sequence is a run of segments, each holding one unit
/// for a length drawn uniformly from `min_segment..=max_segment` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub input_dim: usize,
    pub seq_len: usize,
    pub corpus_size: usize,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_units")]
    pub num_units: usize,
    #[serde(default = "default_min_segment")]
    pub min_segment: usize,
    #[serde(default = "default_max_segment")]
    pub max_segment: usize,
}

impl SyntheticConfig {
    pub fn new(input_dim: usize, seq_len: usize, corpus_size: usize, seed: u64) -> Self {
        Self {
            input_dim,
            seq_len,
            corpus_size,
            seed,
            noise_std: default_noise(),
            num_units: default_units(),
            min_segment: default_min_segment(),
            max_segment: default_max_segment(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.seq_len == 0 || self.corpus_size == 0 || self.num_units == 0 {
            return Err(StarError::Config(
                "input_dim, seq_len, corpus_size and num_units must be positive".into(),
            ));
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return Err(StarError::Config(format!(
                "invalid segment range {}..={}",
                self.min_segment, self.max_segment
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(StarError::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// Generates the corpus; identical configs give identical corpora.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, n) = (cfg.input_dim, cfg.seq_len);
    let units: Vec<Vec<f64>> = (0..cfg.num_units)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut corpus = Vec::with_capacity(cfg.corpus_size);
    for _ in 0..cfg.corpus_size {
        let mut data = vec![0.0; d * n];
        let mut t = 0;
        while t < n {
            let len = rng.random_range(cfg.min_segment..=cfg.max_segment);
            let unit = &units[rng.random_range(0..cfg.num_units)];
            for step in t..(t + len).min(n) {
                for k in 0..d {
                    data[k * n + step] = unit[k];
                }
            }
            t += len;
        }
        if cfg.noise_std > 0.0 {
            for v in &mut data {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.noise_std * z;
            }
        }
        // f32-representable, so a corpus written to STAR files loads back unchanged
        for v in &mut data {
            *v = *v as f32 as f64;
        }
        corpus.push(Tensor::matrix(d, n, data)?);
    }
    Ok(corpus)
}

/// Loads `input_dim x N` sequences from STAR files.
pub fn load_files(paths: &[PathBuf], input_dim: usize) -> Result<Vec<Tensor>> {
    paths
        .iter()
        .map(|p| {
            let t = io::load(p)?;
            match t.shape() {
                [d, n] if *d == input_dim && *n > 0 => Ok(t),
                s => Err(StarError::Config(format!(
                    "{} has shape {s:?}, expected [{input_dim}, N]",
                    p.display()
                ))),
            }
        })
        .collect()
}

/// Writes a corpus as `seq_00000.star`, ... into `dir`.
pub fn write_corpus(corpus: &[Tensor], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    corpus
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let path = dir.join(format!("seq_{i:05}.star"));
            io::save(t, &path)?;
            Ok(path)
        })
        .collect()
}

/// Epoch-wise shuffled index stream over a corpus.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(corpus_len: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..corpus_len).collect(),
            cursor: corpus_len,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.reshuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}
