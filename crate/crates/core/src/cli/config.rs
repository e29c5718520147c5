use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ais::AisConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::hmc::HmcConfig;
use crate::metrics::EvalConfig;
use crate::targets::TargetSpec;
use crate::train::TrainConfig;

/// One experiment, read from a single TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub target: TargetSpec,
    pub flow: FlowConfig,
    #[serde(default)]
    pub hmc: HmcConfig,
    #[serde(default)]
    pub ais: AisConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// A parsed config together with the hash of its source text.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
    pub path: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = Self::parse(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok(LoadedConfig {
            config,
            hash: config_hash(&text),
            path: path.to_path_buf(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.hmc.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Hex SHA-256 of the config text.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
