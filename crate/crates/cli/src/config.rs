//! Experiment configuration: one JSON document with optional sections;
//! anything omitted falls back to defaults, unknown keys are rejected,
//! and path entries resolve relative to the config file itself.

use anyhow::{Context, Result};
use ctxbias_core::hef::HefConfig;
use ctxbias_core::model::ModelConfig;
use ctxbias_core::synth::SynthConfig;
use ctxbias_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub hef: HefConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Loads the config and resolves its path entries relative to the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(p) = cfg.paths.data.take() {
            cfg.paths.data = Some(resolve(base, p));
        }
        if let Some(p) = cfg.paths.checkpoint.take() {
            cfg.paths.checkpoint = Some(resolve(base, p));
        }
        Ok(cfg)
    }
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}
