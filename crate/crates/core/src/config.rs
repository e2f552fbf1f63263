//! JSON run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PreprocessConfig, SynthConfig};
use crate::error::{LayaError, Result};
use crate::model::ModelConfig;
use crate::probe::ProbeConfig;
use crate::robustness::NoiseConfig;
use crate::sigreg::SigRegConfig;
use crate::train::TrainConfig;
use crate::viz::TimelineStyle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizConfig {
    pub width: usize,
    pub height: usize,
    pub strip_height: usize,
    pub max_channels: usize,
    pub window_seconds: f64,
}

impl Default for VizConfig {
    fn default() -> Self {
        let s = TimelineStyle::default();
        VizConfig {
            width: s.width,
            height: s.height,
            strip_height: s.strip_height,
            max_channels: s.max_channels,
            window_seconds: 16.0,
        }
    }
}

impl VizConfig {
    pub fn style(&self) -> TimelineStyle {
        TimelineStyle {
            width: self.width,
            height: self.height,
            strip_height: self.strip_height,
            max_channels: self.max_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sigreg: SigRegConfig,
    pub probe: ProbeConfig,
    pub noise: NoiseConfig,
    pub viz: VizConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: SynthConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sigreg: SigRegConfig::default(),
            probe: ProbeConfig::default(),
            noise: NoiseConfig::default(),
            viz: VizConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| LayaError::Format {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LayaError::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sigreg.validate()?;
        self.probe.validate()?;
        self.noise.validate()?;
        if self.data.duration_s < self.train.window_seconds.max(self.probe.window_seconds) {
            return Err(LayaError::config(
                "data.duration_s",
                "recordings must hold one training and one probing window",
            ));
        }
        if self.viz.width < 2 || self.viz.height <= self.viz.strip_height {
            return Err(LayaError::config("viz.height", "must exceed viz.strip_height"));
        }
        Ok(())
    }

    /// Pretty JSON with every default materialized.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| LayaError::io(dir, e))?;
        let path = dir.join("config.resolved.json");
        std::fs::write(&path, self.to_json()?).map_err(|e| LayaError::io(&path, e))
    }
}
