use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::config::TrainConfig;
use crate::training::synth::{generate_synthetic, Dataset, SyntheticDatasetSpec};

use super::dataset_io::read_dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory.
    Synthetic(SyntheticDatasetSpec),
    /// A directory holding `manifest.json`.
    Dir(PathBuf),
}

impl DataSource {
    /// Relative directories resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(spec) => generate_synthetic(spec),
            DataSource::Dir(dir) => read_dataset(&base.join(dir)),
        }
    }
}

/// One experiment. Every command reads the parts it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Write an intermediate checkpoint every this many epochs; 0 for final only.
    #[serde(default)]
    pub save_every: usize,
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
}

impl RunConfig {
    /// Strict parse; errors carry the JSON path of the offending field.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.train {
            t.validate().map_err(|e| prefix("train", e))?;
        }
        if let Some(DataSource::Synthetic(s)) = &self.data {
            s.validate().map_err(|e| prefix("data.synthetic", e))?;
        }
        Ok(())
    }

    /// Replaces every seed in the config.
    pub fn override_seed(&mut self, seed: u64) {
        if let Some(t) = &mut self.train {
            t.seed = seed;
        }
        if let Some(DataSource::Synthetic(s)) = &mut self.data {
            s.seed = seed;
        }
    }

    pub fn require_train(&self) -> Result<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| Error::config("train", "missing"))
    }

    pub fn require_data(&self) -> Result<&DataSource> {
        self.data.as_ref().ok_or_else(|| Error::config("data", "missing"))
    }
}

fn prefix(root: &str, e: Error) -> Error {
    match e {
        Error::Config { path, msg } => Error::config(format!("{root}.{path}"), msg),
        other => other,
    }
}
