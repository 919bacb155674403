use std::path::Path;

use anyhow::Context;
use sarcscore::{DSarcNetConfig, PatchNetConfig, PatchTrainConfig, PrepareOptions, SplitSpec, SynthDatasetSpec, TrainConfig};
use serde::{Deserialize, Serialize};

/// Every tunable of every command. Sections mirror the library config types
/// and may be given partially in a TOML file; missing keys keep defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prepare: PrepareOptions,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub model: DSarcNetConfig,
    pub patchnet: PatchNetConfig,
    pub patch_train: PatchTrainConfig,
    pub synth: SynthDatasetSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| sarcscore::Error::io(path, e))
            .with_context(|| "reading --config")?;
        toml::from_str(&text)
            .map_err(|e| sarcscore::Error::Config(format!("{}: {}", path.display(), e.message())).into())
    }

    /// `--seed` drives every random stream of the run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.split.seed = seed;
        self.train.seed = seed;
        self.model.seed = seed;
        self.patchnet.seed = seed;
        self.patch_train.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
