//! Pipeline configuration file.

use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::parse_dtype;
use crate::fewshot::FinetuneConfig;
use crate::models::ModelConfig;
use crate::ssl::SslConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// Where the training chips come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub toy_classes: usize,
    pub toy_train_per_class: usize,
    pub toy_test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            toy_classes: 10,
            toy_train_per_class: 8,
            toy_test_per_class: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub count: usize,
    pub batch_size: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            count: 5000,
            batch_size: 64,
        }
    }
}

/// Every stage's settings in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// `f32` or `f64`.
    pub dtype: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthesis: SynthesisConfig,
    pub ssl: SslConfig,
    pub finetune: FinetuneConfig,
}

impl PipelineConfig {
    pub fn paper() -> Self {
        Self {
            dtype: "f32".into(),
            data: DataConfig::default(),
            model: ModelConfig::paper(),
            train: TrainConfig::default(),
            synthesis: SynthesisConfig::default(),
            ssl: SslConfig::paper(),
            finetune: FinetuneConfig::default(),
        }
    }

    /// 32-pixel models and a short run that finish on one CPU core.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig {
                iterations: 2000,
                checkpoint_every: 500,
                ..TrainConfig::default()
            },
            synthesis: SynthesisConfig {
                count: 1000,
                ..SynthesisConfig::default()
            },
            ssl: SslConfig::desk(),
            ..Self::paper()
        }
    }

    pub fn dtype(&self) -> Result<DType> {
        parse_dtype(&self.dtype)
    }

    pub fn validate(&self) -> Result<()> {
        self.dtype()?;
        self.model.validate()?;
        self.train.validate()?;
        self.ssl.validate()?;
        self.finetune.validate()?;
        if self.data.toy_classes < 2 {
            return Err(Error::Config("data.toy_classes must be at least 2".into()));
        }
        if self.synthesis.batch_size == 0 {
            return Err(Error::Config("synthesis.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, so formatting and comments
    /// in the source file do not matter.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::paper()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_config_and_hash() {
        for cfg in [PipelineConfig::paper(), PipelineConfig::desk()] {
            let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        }
        assert_ne!(
            PipelineConfig::paper().hash().unwrap(),
            PipelineConfig::desk().hash().unwrap()
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = PipelineConfig::desk().to_toml().unwrap();
        text = text.replacen("[model]", "[model]\nwidth = 3", 1);
        assert!(PipelineConfig::from_toml(&text).is_err());
    }
}
