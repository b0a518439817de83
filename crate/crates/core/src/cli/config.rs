use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{HnActivation, HnInit, TrainConfig};
use crate::networks::ModelConfig;
use crate::scheduler::{NoiseSchedule, SamplerConfig, SamplerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub steps: usize,
    pub guidance: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            kind: d.kind,
            steps: d.steps,
            guidance: d.guidance,
        }
    }
}

impl SamplerSection {
    pub fn build(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.kind,
            steps: self.steps,
            guidance: self.guidance,
        }
    }
}

/// Synthetic corpus generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub count: usize,
    pub styles: Vec<crate::data::BridgeStyle>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        use crate::data::BridgeStyle::*;
        Self {
            count: 200,
            styles: vec![Arch, Truss, Suspension],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_weight: f64,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 2e-3,
            kl_weight: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of captions replaced by the empty prompt.
    pub uncond_prob: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            uncond_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TiSection {
    pub placeholder: String,
    pub init_word: String,
    /// Training caption; `{}` stands for the placeholder.
    pub template: String,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TiSection {
    fn default() -> Self {
        Self {
            placeholder: "<the core bridge>".into(),
            init_word: "bridge".into(),
            template: "a photo of a {}".into(),
            steps: 500,
            batch_size: 4,
            lr: 5e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DreamboothSection {
    pub instance_token: String,
    pub class_token: String,
    pub class_per_instance: usize,
    pub prior_weight: f64,
    pub train_text: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DreamboothSection {
    fn default() -> Self {
        Self {
            instance_token: "beike".into(),
            class_token: "bridge".into(),
            class_per_instance: 5,
            prior_weight: 1.0,
            train_text: false,
            steps: 400,
            batch_size: 4,
            lr: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypernetSection {
    pub name: String,
    pub multipliers: Vec<f64>,
    pub activation: HnActivation,
    pub init: HnInit,
    pub template: String,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for HypernetSection {
    fn default() -> Self {
        Self {
            name: "coral_shell_bridge".into(),
            multipliers: vec![1.0, 2.0, 1.0],
            activation: HnActivation::Identity,
            init: HnInit::Normal,
            template: "a picture of [filewords], art by [name]".into(),
            steps: 300,
            batch_size: 4,
            lr: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSection {
    pub name: String,
    pub rank: usize,
    pub alpha: f64,
    /// Standard deviation of the initial `A` entries.
    pub a_std: f64,
    pub template: String,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LoraSection {
    fn default() -> Self {
        Self {
            name: "aki".into(),
            rank: 4,
            alpha: 4.0,
            a_std: 0.01,
            template: "[filewords]".into(),
            steps: 300,
            batch_size: 4,
            lr: 5e-3,
        }
    }
}

macro_rules! train_config {
    ($($t:ty),*) => {$(
        impl $t {
            pub fn train(&self) -> TrainConfig {
                TrainConfig {
                    steps: self.steps,
                    batch_size: self.batch_size,
                    lr: self.lr,
                }
            }
        }
    )*};
}

train_config!(VaeSection, PretrainSection, TiSection, DreamboothSection, HypernetSection, LoraSection);

/// Everything a command needs. Every field has a default; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Where command outputs go.
    pub run_dir: PathBuf,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerSection,
    pub dataset: DatasetSection,
    pub vae: VaeSection,
    pub pretrain: PretrainSection,
    pub ti: TiSection,
    pub dreambooth: DreamboothSection,
    pub hypernet: HypernetSection,
    pub lora: LoraSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerSection::default(),
            dataset: DatasetSection::default(),
            vae: VaeSection::default(),
            pretrain: PretrainSection::default(),
            ti: TiSection::default(),
            dreambooth: DreamboothSection::default(),
            hypernet: HypernetSection::default(),
            lora: LoraSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&d.to_toml().unwrap()).unwrap(), d);
        assert_eq!(RunConfig::from_toml("").unwrap(), d);
        let partial = RunConfig::from_toml("seed = 3\n[lora]\nrank = 8\n").unwrap();
        assert_eq!((partial.seed, partial.lora.rank, partial.lora.steps), (3, 8, 300));
        assert!(matches!(RunConfig::from_toml("sede = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[lora]\nrnak = 3"), Err(Error::Config(_))));
    }
}
