use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PairSpec, PreprocessConfig};
use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::metrics::DoseStatistic;

pub const RUN_CONFIG_SCHEMA: u32 = 1;

/// Everything a command-line run needs, as stored in a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub engine: EngineConfig,
    /// Template for generated pairs; pair `i` uses seed `pair.seed + i`.
    pub pair: PairSpec,
    pub preprocess: PreprocessConfig,
    /// Number of pairs the `phantom` command generates.
    pub pairs: usize,
    pub dose_statistic: DoseStatistic,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: RUN_CONFIG_SCHEMA,
            engine: EngineConfig::default(),
            pair: PairSpec::default(),
            preprocess: PreprocessConfig::default(),
            pairs: 10,
            dose_statistic: DoseStatistic::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        if cfg.schema_version != RUN_CONFIG_SCHEMA {
            return Err(Error::format(
                path,
                format!(
                    "unsupported config schema {}, expected {RUN_CONFIG_SCHEMA}",
                    cfg.schema_version
                ),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Use one seed for generation and for the model.
    pub fn set_seed(&mut self, seed: u64) {
        self.engine.seed = seed;
        self.pair.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        self.pair.phantom.validate()?;
        if self.pairs == 0 {
            return Err(Error::InvalidConfig("pairs must be >= 1".into()));
        }
        if self.preprocess.target_extents.contains(&0) {
            return Err(Error::InvalidConfig(
                "target extents must be positive".into(),
            ));
        }
        Ok(())
    }
}
