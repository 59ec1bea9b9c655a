//! Run configuration: `[backbone]`, `[model]`, and `[train]` sections of
//! one TOML file. Missing keys fall back to the defaults below, so a
//! config file only needs the values it overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RelationMode};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive validation-loss increases before stopping.
    pub patience: u32,
    /// Learning-rate divisor on plateau.
    pub decay_factor: f64,
    /// Non-improving epochs before a decay.
    pub decay_patience: u32,
    pub val_fraction: f64,
    /// Binarization threshold.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-4,
            batch_size: 8,
            max_epochs: 200,
            patience: 5,
            decay_factor: 10.0,
            decay_patience: 1,
            val_fraction: 0.1,
            threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub model: ModelSection,
    pub train: TrainSection,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSection {
    pub num_labels: usize,
    pub parcel_channels: usize,
    pub relation_channels: usize,
    pub head_hidden: usize,
    pub relation: RelationMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            num_labels: m.num_labels,
            parcel_channels: m.parcel_channels,
            relation_channels: m.relation_channels,
            head_hidden: m.head_hidden,
            relation: m.relation,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            num_labels: self.num_labels,
            parcel_channels: self.parcel_channels,
            relation_channels: self.relation_channels,
            head_hidden: self.head_hidden,
            relation: self.relation,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.model.to_model_config().validate()?;
        let t = &self.train;
        if t.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if t.batch_size == 0 || t.max_epochs == 0 {
            return Err(Error::config("batch size and epoch count must be positive"));
        }
        if !(0.0..1.0).contains(&t.val_fraction) || t.val_fraction <= 0.0 {
            return Err(Error::config("val_fraction must lie in (0, 1)"));
        }
        if t.decay_factor <= 1.0 {
            return Err(Error::config("decay_factor must exceed 1"));
        }
        if !(0.0..=1.0).contains(&t.threshold) {
            return Err(Error::config("threshold must lie in [0, 1]"));
        }
        if t.patience == 0 || t.decay_patience == 0 {
            return Err(Error::config("patience values must be positive"));
        }
        Ok(())
    }
}
