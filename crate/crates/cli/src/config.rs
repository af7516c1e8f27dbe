//! Run configuration: defaults, overridden by a TOML file, overridden by
//! command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use mtrl::data::SynthConfig;
use mtrl::numerics::derive_seed;
use mtrl::trainer::{ModelSpec, OptimConfig};
use mtrl::FeedbackConfig;
use serde::{Deserialize, Serialize};

/// Derivation offset for the dataset seed. Model init and shuffling use
/// the offsets defined by the trainer.
pub const SEED_DATA: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackSection {
    pub sources: String,
    pub sinks: String,
}

impl Default for FeedbackSection {
    fn default() -> Self {
        FeedbackSection {
            sources: "none".into(),
            sinks: "none".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Single top-level seed; every other seed is derived from it.
    pub seed: u64,
    pub data: SynthConfig,
    pub model: ModelSpec,
    pub feedback: FeedbackSection,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: SynthConfig::default(),
            model: ModelSpec::default(),
            feedback: FeedbackSection::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("cannot parse config {}", path.display()))
    }

    /// Fans the top-level seed out into the sub-configs.
    pub fn resolve(mut self) -> Result<Self> {
        self.data.seed = derive_seed(self.seed, SEED_DATA);
        self.optim.seed = self.seed;
        self.feedback_config()?;
        self.optim.validate()?;
        Ok(self)
    }

    pub fn feedback_config(&self) -> Result<FeedbackConfig> {
        Ok(FeedbackConfig::parse(&self.feedback.sources, &self.feedback.sinks)?)
    }

    /// Serializes without the derived sub-seeds: they are recomputed from
    /// `seed` on resolve, and TOML integers cannot hold the full u64 range.
    pub fn to_toml(&self) -> Result<String> {
        let mut value = self.to_json()?;
        for section in ["data", "optim"] {
            if let Some(t) = value.get_mut(section).and_then(|v| v.as_object_mut()) {
                t.remove("seed");
            }
        }
        Ok(toml::to_string(&toml::Value::try_from(value)?)?)
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

/// Writes the resolved configuration next to an output artifact.
pub fn write_sidecar(artifact: &Path, cfg: &RunConfig) -> Result<()> {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".run.toml");
    let path = std::path::PathBuf::from(name);
    std::fs::write(&path, cfg.to_toml()?).with_context(|| format!("cannot write {}", path.display()))
}
