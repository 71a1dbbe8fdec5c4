use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layer::LayerVariant;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const VERSION: &str = concat!("pmp-core ", env!("CARGO_PKG_VERSION"));

/// Fully resolved settings of a `train` run, echoed to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub bundle: Option<PathBuf>,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub partition: bool,
    pub adaptive_combination: bool,
    pub root_specific: bool,
    pub fanout_cap: Option<usize>,
    pub deterministic: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bundle: None,
            hidden_dim: 64,
            num_layers: 1,
            partition: true,
            adaptive_combination: true,
            root_specific: true,
            fanout_cap: None,
            deterministic: false,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::bundle(path, e.to_string()))
    }

    pub fn variant(&self) -> Result<LayerVariant> {
        LayerVariant::new(
            self.partition,
            self.adaptive_combination,
            self.root_specific,
        )
    }

    pub fn model_config(&self, feature_dim: usize, num_relations: usize) -> Result<ModelConfig> {
        let config = ModelConfig {
            feature_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_relations,
            variant: self.variant()?,
            dropout_p: self.train.dropout_p,
            fanout_cap: self.fanout_cap,
        };
        config.validate()?;
        Ok(config)
    }
}

/// `(config hash, seed, version)` stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new<T: Serialize>(command: &str, config: &T, seed: u64) -> Result<Self> {
        let canonical = serde_json::to_vec(&json!({ "command": command, "config": config }))?;
        Ok(Self {
            config_hash: hex::encode(Sha256::digest(&canonical)),
            seed,
            version: VERSION.to_string(),
        })
    }

    /// Body of the leading `#` line in CSV artifacts.
    pub fn comment(&self) -> String {
        format!(
            "config_hash={} seed={} version={}",
            self.config_hash, self.seed, self.version
        )
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("plain struct")
    }
}

/// Adds a `provenance` field to a JSON object.
pub fn stamp(mut value: Value, provenance: &Provenance) -> Value {
    if let Value::Object(map) = &mut value {
        map.insert("provenance".into(), provenance.to_value());
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_file_uses_defaults() {
        let c: RunConfig =
            serde_json::from_str(r#"{"hidden_dim": 8, "train": {"batch_size": 32}}"#).unwrap();
        assert_eq!(c.hidden_dim, 8);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.learning_rate, 0.01);
        assert!(c.root_specific);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"hiden_dim": 8}"#).is_err());
    }

    #[test]
    fn hash_depends_on_config() {
        let a = Provenance::new("train", &RunConfig::default(), 0).unwrap();
        let b = Provenance::new("train", &RunConfig::default(), 0).unwrap();
        let c = Provenance::new(
            "train",
            &RunConfig {
                hidden_dim: 3,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a.config_hash, c.config_hash);
        assert_eq!(a.config_hash.len(), 64);
    }
}
