//! Unified run configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::decode::DecodeConfig;
use crate::error::{LvrError, Result};
use crate::grpo::RlConfig;
use crate::model::{ModelConfig, Vocab};
use crate::sft::SftConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Output directory for checkpoints, metrics and the resolved config.
    pub out: Option<PathBuf>,
    /// Dataset manifest.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Worker threads; 0 leaves the choice to the thread pool.
    pub threads: usize,
    /// Write every RL rollout to `rollouts.jsonl`.
    pub dump_rollouts: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { out: None, data: None, checkpoint: None, threads: 0, dump_rollouts: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub decode: DecodeConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| LvrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LvrError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LvrError::Config(e.to_string()))
    }

    /// Writes `resolved_config.toml` into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.data.n_colors, self.model.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.patch_size != self.data.patch_size {
            return Err(LvrError::Config(format!(
                "model.patch_size {} differs from data.patch_size {}",
                self.model.patch_size, self.data.patch_size
            )));
        }
        self.model.validate()?;
        self.data.validate()?;
        self.sft.validate()?;
        self.rl.validate()?;
        self.decode.validate()?;
        self.vocab().map(|_| ())
    }
}
