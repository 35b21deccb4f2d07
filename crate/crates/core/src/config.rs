//! Run configuration files and `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::AudioConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Result, SasError};
use crate::losses::{EmbedderConfig, LossWeights};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<String>,
    pub out: Option<String>,
}

/// Every tunable of a run. All keys are optional; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub audio: AudioConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub embedder: EmbedderConfig,
    pub losses: LossWeights,
    pub trainer: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SasError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SasError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            embedder: self.embedder.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.model().validate()?;
        self.losses.validate()?;
        self.trainer.validate()?;
        if self.decoder.n_mels != self.audio.n_mels {
            return Err(SasError::Config(format!(
                "decoder.n_mels {} differs from audio.n_mels {}",
                self.decoder.n_mels, self.audio.n_mels
            )));
        }
        Ok(())
    }

    /// Applies overrides of the form `section.key=value`. Values are read as
    /// TOML literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| SasError::Config(e.to_string()))?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| SasError::Config(format!("override {ov:?} is not key=value")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| SasError::Config(format!("override key {key:?} must be section.key")))?;
            let table = root
                .get_mut(section)
                .and_then(|v| v.as_table_mut())
                .ok_or_else(|| SasError::Config(format!("unknown config section {section:?}")))?;
            let value = parse_value(raw.trim());
            table.insert(field.to_string(), value);
        }
        let text = toml::to_string(&root).map_err(|e| SasError::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Holder {
        v: toml::Value,
    }
    toml::from_str::<Holder>(&format!("v = {raw}"))
        .map(|h| h.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}
