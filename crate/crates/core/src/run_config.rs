//! The JSON document read by the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{nest, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Where `train` writes final weights.
    pub weights: Option<PathBuf>,
    /// Resume point for `train`: read if present, rewritten every
    /// `checkpoint_every` iterations and at the end.
    pub checkpoint: Option<PathBuf>,
    /// 0 writes the checkpoint only at the end.
    pub checkpoint_every: usize,
    /// Loss lines are printed every this many iterations; 0 silences them.
    pub log_every: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub io: IoConfig,
}

impl RunConfig {
    /// Strict parse: unknown keys and type mismatches are reported with the
    /// path of the offending field, then the values are validated.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(_) => nest(&path.display().to_string(), e),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let (h, w) = (self.train.data.height, self.train.data.width);
        let grid = (h / 16, w / 16);
        if let Some(&s) = self.model.spp.scales.iter().find(|&&s| s > grid.0 || s > grid.1) {
            return Err(Error::Config(format!(
                "model.spp.scales: scale {s} exceeds the {}x{} attention grid of {h}x{w} training images",
                grid.0, grid.1
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
