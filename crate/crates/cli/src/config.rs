//! Experiment bundles: dataset, split, seeds and the stage plan, stored as TOML.

use std::path::Path;

use cardio_ssl::train::Plan;
use cardio_ssl::{EncoderVariant, SplitSpec, Stage, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "CARDIO_SSL_OUT";
/// Output root used when neither `--out` nor the environment variable is set.
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const DEFAULT_SEEDS: [u64; 3] = [40, 41, 42];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub split: SplitSpec,
    pub synth: SynthConfig,
    pub plan: Plan,
}

/// Preset names accepted by `--preset`.
pub const PRESETS: &[&str] = &[
    "ssl-64",
    "ssl-32",
    "supervised-end-to-end",
    "random-frozen",
    "ssl-64-tiny",
    "ssl-32-tiny",
    "ssl-8-tiny",
    "ssl-4-tiny",
    "supervised-end-to-end-tiny",
    "random-frozen-tiny",
];

// The tiny presets trade the full 500-epoch budget for minutes of CPU time.
const TINY_PRETRAIN_EPOCHS: usize = 6;
const TINY_PRETRAIN_LR: f64 = 1e-3;
const TINY_FINETUNE_EPOCHS: usize = 300;
const TINY_FINETUNE_LR: f64 = 1e-3;
const TINY_SUPERVISED_EPOCHS: usize = 40;
const TINY_SUPERVISED_LR: f64 = 3e-4;
const TINY_SUPERVISED_BATCH: usize = 4;

fn pretrain_stage(batch_size: usize, tiny: bool) -> TrainConfig {
    let base = TrainConfig { batch_size, ..TrainConfig::pretrain_default() };
    if tiny {
        TrainConfig {
            epochs: TINY_PRETRAIN_EPOCHS,
            learning_rate: TINY_PRETRAIN_LR,
            encoder: EncoderVariant::Tiny,
            checkpoint_every: 2,
            ..base
        }
    } else {
        base
    }
}

fn finetune_stage(tiny: bool) -> TrainConfig {
    let base = TrainConfig::finetune_default();
    if tiny {
        TrainConfig { epochs: TINY_FINETUNE_EPOCHS, learning_rate: TINY_FINETUNE_LR, encoder: EncoderVariant::Tiny, ..base }
    } else {
        base
    }
}

fn supervised_stage(tiny: bool) -> TrainConfig {
    let base = TrainConfig { weight_decay: 0.0, lr_milestones: vec![], ..TrainConfig::supervised_default() };
    if tiny {
        TrainConfig {
            epochs: TINY_SUPERVISED_EPOCHS,
            learning_rate: TINY_SUPERVISED_LR,
            batch_size: TINY_SUPERVISED_BATCH,
            encoder: EncoderVariant::Tiny,
            ..base
        }
    } else {
        base
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (stem, tiny) = match name.strip_suffix("-tiny") {
            Some(stem) => (stem, true),
            None => (name, false),
        };
        let plan = match stem {
            "supervised-end-to-end" => Plan { key: name.into(), pretrain: None, finetune: supervised_stage(tiny) },
            "random-frozen" => Plan { key: name.into(), pretrain: None, finetune: finetune_stage(tiny) },
            _ => {
                let batch = stem
                    .strip_prefix("ssl-")
                    .and_then(|b| b.parse::<usize>().ok())
                    .filter(|_| PRESETS.contains(&name))
                    .ok_or_else(|| CliError::UnknownPreset(name.into(), PRESETS.join(", ")))?;
                Plan { key: name.into(), pretrain: Some(pretrain_stage(batch, tiny)), finetune: finetune_stage(tiny) }
            }
        };
        Ok(Self { name: name.into(), seeds: DEFAULT_SEEDS.to_vec(), split: SplitSpec::new(0.75, 7), synth: SynthConfig::acceptance(), plan })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(cardio_ssl::Error::InvalidInput("at least one seed is required".into()).into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(cardio_ssl::Error::Config(format!("experiment name {:?} is not a valid directory name", self.name)).into());
        }
        self.synth.validate()?;
        self.plan.validate()?;
        Ok(())
    }

    /// Replaces the seed list.
    pub fn with_seeds(mut self, seeds: Vec<u64>) -> Self {
        self.seeds = seeds;
        self
    }

    /// Whether any stage trains the encoder with NT-Xent first.
    pub fn is_pretrained(&self) -> bool {
        self.plan.pretrain.is_some()
    }

    pub fn is_supervised(&self) -> bool {
        self.plan.finetune.stage == Stage::Supervised
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::config("<experiment>", e))
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::config(origin, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, path)
    }
}

/// Reads a single-stage training config.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    TrainConfig::from_toml(&text).map_err(|e| CliError::config(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_builds_and_validates() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.plan.key, *name);
            assert_eq!(cfg.seeds, DEFAULT_SEEDS);
        }
        assert!(matches!(ExperimentConfig::preset("ssl-16-tiny"), Err(CliError::UnknownPreset(..))));
        assert!(matches!(ExperimentConfig::preset("bogus"), Err(CliError::UnknownPreset(..))));
    }

    #[test]
    fn presets_have_the_expected_stages() {
        let ssl = ExperimentConfig::preset("ssl-64-tiny").unwrap();
        assert_eq!(ssl.plan.pretrain.as_ref().unwrap().batch_size, 64);
        assert_eq!(ssl.plan.finetune.encoder, EncoderVariant::Tiny);
        let full = ExperimentConfig::preset("ssl-64").unwrap();
        assert_eq!(full.plan.pretrain.as_ref().unwrap(), &TrainConfig::pretrain_default());
        assert!(ExperimentConfig::preset("supervised-end-to-end-tiny").unwrap().is_supervised());
        let random = ExperimentConfig::preset("random-frozen-tiny").unwrap();
        assert!(!random.is_pretrained() && !random.is_supervised());
    }

    #[test]
    fn toml_round_trip() {
        for name in ["ssl-8-tiny", "random-frozen"] {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text, Path::new("x.toml")).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::preset("ssl-4-tiny").unwrap().to_toml().unwrap();
        text.insert_str(0, "colour = 3\n");
        assert!(matches!(ExperimentConfig::from_toml(&text, Path::new("x.toml")), Err(CliError::Config { .. })));
    }
}
