//! Resolved run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{FeatureConfig, InputModality};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::videodata::GenConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub count: usize,
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub generator: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 290,
            ratios: [200.0 / 290.0, 30.0 / 290.0, 60.0 / 290.0],
            generator: GenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub lengths: Vec<usize>,
    /// Evaluate truncated clips with one full-length model instead of
    /// retraining per length.
    pub reuse_model: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: vec![0, 1, 2, 3, 4],
            lengths: vec![15, 30, 60],
            reuse_model: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed for data generation, initialization and shuffling.
    pub seed: u64,
    pub modality: InputModality,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            modality: InputModality::Frames,
            data: DataConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    /// Reads TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    /// Propagates shared settings into the sections that consume them and
    /// validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.modality.configure(&mut self.model, self.features.dim);
        self.data.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        Ok(self)
    }

    /// Hex SHA-256 of the canonical JSON form; independent of key order in
    /// the source file.
    pub fn fingerprint(&self) -> Result<String> {
        let v = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        let digest = Sha256::digest(v.to_string().as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
