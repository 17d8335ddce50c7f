//! Checkpoint directories: one STAR tensor file per parameter plus
//! `manifest.json`:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "config": { "num_layers": 2, "width": 16, ... },
//!   "parameters": { "layer.0.q_proj.weight": "layer.0.q_proj.weight.star", ... }
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{param_names, ModelWeights, Params};
use crate::error::{Result, StarError};
use crate::numerics::io;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub parameters: BTreeMap<String, String>,
}

/// Writes `weights` into `dir`, creating it if needed. Values are stored as
/// f32.
pub fn save(weights: &ModelWeights, dir: &Path) -> Result<()> {
    weights.audit()?;
    fs::create_dir_all(dir)?;
    let mut parameters = BTreeMap::new();
    for (name, t) in param_names(weights.config.num_layers)
        .into_iter()
        .zip(weights.params.iter())
    {
        let file = format!("{name}.star");
        io::save(t, &dir.join(&file))?;
        parameters.insert(name, file);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: weights.config.clone(),
        parameters,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<ModelWeights> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| StarError::Checkpoint(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(StarError::Checkpoint(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    let names = param_names(manifest.config.num_layers);
    let expected: BTreeSet<&str> = names.iter().map(String::as_str).collect();
    let present: BTreeSet<&str> = manifest.parameters.keys().map(String::as_str).collect();
    if let Some(missing) = expected.difference(&present).next() {
        return Err(StarError::Checkpoint(format!("manifest lacks parameter {missing}")));
    }
    if let Some(extra) = present.difference(&expected).next() {
        return Err(StarError::Checkpoint(format!("manifest has unknown parameter {extra}")));
    }
    let tensors = names
        .iter()
        .map(|n| io::load(&dir.join(&manifest.parameters[n])))
        .collect::<Result<Vec<_>>>()?;
    let params = Params::from_vec(manifest.config.num_layers, tensors)?;
    ModelWeights::from_params(manifest.config, params)
}
