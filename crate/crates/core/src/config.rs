//! Run configuration: one TOML document with a section per component.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::AugmentationPolicy;
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::lm::{DecodingConfig, LmConfig};
use crate::mapper::{MapperConfig, MapperVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Weight of the captioning loss; the speaker loss gets `1 - alpha`.
    pub alpha: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Epochs with the language model frozen.
    pub stage_a_epochs: usize,
    /// Epochs with the language model trainable (when `finetune_lm`).
    pub stage_b_epochs: usize,
    pub speaker_loss_enabled: bool,
    pub augmentations_enabled: bool,
    pub finetune_lm: bool,
    /// Global L2 norm limit on gradients; none when unset.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            learning_rate: 1e-4,
            warmup_steps: 500,
            batch_size: 64,
            stage_a_epochs: 100,
            stage_b_epochs: 30,
            speaker_loss_enabled: true,
            augmentations_enabled: true,
            finetune_lm: true,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("training.alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("training.learning_rate must be positive".into()));
        }
        if self.warmup_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("training.warmup_steps and training.batch_size must be positive".into()));
        }
        if self.stage_a_epochs + self.stage_b_epochs == 0 {
            return Err(Error::Config("at least one training epoch is required".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("training.grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    /// Linear warmup to the base rate, constant afterwards.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub training: TrainingConfig,
    pub mapper: MapperConfig,
    pub lm: LmConfig,
    pub augment: AugmentationPolicy,
    pub decoding: DecodingConfig,
    pub encoder: EncoderSpec,
}

impl Config {
    /// Reduced widths and epoch counts that train on one CPU core in
    /// minutes. The embedding size, prefix length and mapper depth are
    /// unchanged.
    pub fn desk() -> Self {
        let mut c = Config::default();
        c.mapper.width = 64;
        c.mapper.heads = 4;
        c.mapper.ff_width = 256;
        c.mapper.mlp_hidden = 512;
        c.lm.width = 64;
        c.lm.heads = 4;
        c.lm.ff_width = 256;
        c.lm.max_positions = 128;
        c.lm.bpe_merges = 300;
        c.training.learning_rate = 2e-3;
        c.training.warmup_steps = 20;
        c.training.batch_size = 16;
        c.training.stage_a_epochs = 1;
        c.training.stage_b_epochs = 14;
        c.decoding.max_len = 48;
        c
    }

    /// Sets every trainable-side seed: initialisation, shuffling,
    /// augmentation and sampling. The frozen encoder keeps its own seed.
    pub fn reseed(&mut self, seed: u64) {
        self.training.seed = seed;
        self.mapper.seed = seed;
        self.lm.seed = seed;
        self.augment.seed = seed;
        self.decoding.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.mapper.validate()?;
        self.lm.validate()?;
        self.augment.validate()?;
        if self.mapper.width != self.lm.width {
            return Err(Error::Config(format!(
                "mapper.width {} must equal lm.width {}",
                self.mapper.width, self.lm.width
            )));
        }
        if self.decoding.max_len == 0 {
            return Err(Error::Config("decoding.max_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses and validates. Unknown keys are rejected by name.
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Switches that turn one configuration into an ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoSpeakerLoss,
    FrozenLm,
    NoAugment,
    MlpMapper,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::NoSpeakerLoss, Self::FrozenLm, Self::NoAugment, Self::MlpMapper];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoSpeakerLoss => "no-speaker-loss",
            Self::FrozenLm => "frozen-lm",
            Self::NoAugment => "no-augment",
            Self::MlpMapper => "mlp-mapper",
        }
    }

    pub fn apply(self, config: &mut Config) {
        match self {
            Self::NoSpeakerLoss => config.training.speaker_loss_enabled = false,
            Self::FrozenLm => config.training.finetune_lm = false,
            Self::NoAugment => config.training.augmentations_enabled = false,
            Self::MlpMapper => config.mapper.variant = MapperVariant::Mlp,
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
