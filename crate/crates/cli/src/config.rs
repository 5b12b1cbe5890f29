//! The JSON file behind `--config`. Every section is optional and every
//! field inside a section falls back to its built-in default; flags given on
//! the command line override both.

use std::path::Path;

use anyhow::Context as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use promptbook_core::data::{ImageDims, SyntheticConfig};
use promptbook_core::model::{ModelConfig, PretrainConfig};
use promptbook_core::pipeline::TrainConfig;

use crate::Usage;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Partial architecture overrides, merged over the desk defaults once
    /// the vocabulary size is known.
    pub model: Value,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub data: SyntheticConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Usage(format!("invalid config {}: {e}", path.display())))?;
        if !(config.model.is_null() || config.model.is_object()) {
            return Err(Usage(format!("{}: \"model\" must be an object", path.display())).into());
        }
        Ok(config)
    }

    /// Desk defaults for `vocab_size` and `image`, with the file's `model`
    /// section laid over them.
    pub fn model_config(&self, vocab_size: usize, image: ImageDims) -> anyhow::Result<ModelConfig> {
        let mut merged = serde_json::to_value(ModelConfig {
            image,
            ..ModelConfig::desk(vocab_size)
        })
        .context("serializing the default model config")?;
        if let (Value::Object(base), Value::Object(overrides)) = (&mut merged, &self.model) {
            for (k, v) in overrides {
                if !base.contains_key(k) {
                    return Err(Usage(format!("unknown model config field {k:?}")).into());
                }
                if k == "V" || k == "image" {
                    return Err(Usage(format!("model.{k} is derived from the data and cannot be set")).into());
                }
                base.insert(k.clone(), v.clone());
            }
        }
        let config: ModelConfig =
            serde_json::from_value(merged).map_err(|e| Usage(format!("invalid model config: {e}")))?;
        config.validate().map_err(|e| Usage(e.to_string()))?;
        Ok(config)
    }
}
