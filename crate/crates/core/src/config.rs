//! Run configuration: every hyperparameter of a run in one JSON document.
//! Unknown keys are rejected and omitted keys take the defaults below; the
//! resolved document (with every default spelled out) is embedded in
//! checkpoints and reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::mix_seed;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::probes::ReconProbeConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    /// First scene id of the held-out split (training ids start at 0).
    pub heldout_start_id: u64,
    /// Images used for encoder pretraining (taken from the training split).
    pub stage0_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_scenes: 2000, heldout_scenes: 200, heldout_start_id: 1_000_000, stage0_images: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub recon: ReconProbeConfig,
    /// Held-out images whose generated tokens are mapped.
    pub attention_images: usize,
    /// Pixel size of one grid cell in PGM dumps.
    pub pgm_scale: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { recon: ReconProbeConfig::default(), attention_images: 200, pgm_scale: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Refinement iterations of the `refined` mode.
    pub iterations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iterations: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.probe.recon.optimizer.validate(0)?;
        if self.data.train_scenes == 0 || self.data.heldout_scenes == 0 {
            return Err(Error::Config("data: both splits need at least one scene".into()));
        }
        if self.data.heldout_start_id < self.data.train_scenes as u64 {
            return Err(Error::Config("data: held-out ids overlap the training ids".into()));
        }
        if self.eval.iterations > crate::pipeline::MAX_ITERATIONS {
            return Err(Error::TooManyIterations { requested: self.eval.iterations, max: crate::pipeline::MAX_ITERATIONS });
        }
        if self.probe.pgm_scale == 0 {
            return Err(Error::Config("probe: pgm_scale must be positive".into()));
        }
        Ok(())
    }

    /// The configuration with every default made explicit.
    pub fn resolved(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn train_data_seed(&self) -> u64 {
        mix_seed(self.seed, 1)
    }

    pub fn heldout_data_seed(&self) -> u64 {
        mix_seed(self.seed, 2)
    }
}
