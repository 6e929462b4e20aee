//! Run configuration, read from a TOML file. Every key is optional; missing
//! keys take the defaults listed in `Config::default`.

use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::interaction::{Connectivity, SimulatorConfig};
use crate::refiner::{Ablation, RefinerConfig};
use crate::synth::SyntheticSpec;
use crate::train::TrainConfig;
use crate::volume::Dims;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_cases: usize,
    pub eval_cases: usize,
    #[serde(flatten)]
    pub spec: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_cases: 50,
            eval_cases: 13,
            spec: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub width: usize,
    pub features: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { width: 4, features: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerSection {
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub label_hidden: usize,
    pub crop: Dims,
    pub margin: usize,
    pub auto_exemplars: bool,
    pub stack_residual: bool,
}

impl Default for RefinerSection {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 2,
            ffn_hidden: 32,
            label_hidden: 16,
            crop: [32, 32, 32],
            margin: 4,
            auto_exemplars: true,
            stack_residual: true,
        }
    }
}

/// A partial `[train.encoder]` or `[train.refiner]` table overrides only
/// the keys it names; the rest keep that section's defaults.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSection {
    pub encoder: TrainConfig,
    pub refiner: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            encoder: TrainConfig::default(),
            refiner: TrainConfig {
                epochs: 40,
                lr: 2e-3,
                ..Default::default()
            },
        }
    }
}

impl<'de> Deserialize<'de> for TrainSection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            #[serde(default)]
            encoder: toml::Table,
            #[serde(default)]
            refiner: toml::Table,
        }
        let raw = Raw::deserialize(d)?;
        let base = TrainSection::default();
        Ok(TrainSection {
            encoder: overlay(&base.encoder, raw.encoder).map_err(D::Error::custom)?,
            refiner: overlay(&base.refiner, raw.refiner).map_err(D::Error::custom)?,
        })
    }
}

fn overlay(base: &TrainConfig, patch: toml::Table) -> std::result::Result<TrainConfig, toml::de::Error> {
    let mut table = toml::Table::try_from(base).expect("train config serializes");
    table.extend(patch);
    table.try_into()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSection {
    pub epsilon: usize,
    pub connectivity: usize,
}

impl Default for SimulatorSection {
    fn default() -> Self {
        Self {
            epsilon: 10,
            connectivity: 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub clicks: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { clicks: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub encoder: EncoderSection,
    pub refiner: RefinerSection,
    pub train: TrainSection,
    pub simulator: SimulatorSection,
    pub eval: EvalSection,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        self.train.encoder.validate()?;
        self.train.refiner.validate()?;
        self.refiner_config(Ablation::NONE).validate()?;
        Connectivity::parse(self.simulator.connectivity)?;
        if self.data.train_cases == 0 || self.encoder.width == 0 || self.encoder.features == 0 {
            return Err(Error::Config("case counts and encoder widths must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            width: self.encoder.width,
            features: self.encoder.features,
            classes: self.data.spec.classes,
        }
    }

    pub fn refiner_config(&self, ablation: Ablation) -> RefinerConfig {
        let r = &self.refiner;
        RefinerConfig {
            features: self.encoder.features,
            classes: self.data.spec.classes,
            layers: r.layers,
            heads: r.heads,
            ffn_hidden: r.ffn_hidden,
            label_hidden: r.label_hidden,
            crop: r.crop,
            margin: r.margin,
            auto_exemplars: r.auto_exemplars,
            stack_residual: r.stack_residual,
            ablation,
        }
    }

    pub fn simulator(&self, seed: u64) -> SimulatorConfig {
        SimulatorConfig {
            epsilon: self.simulator.epsilon,
            connectivity: Connectivity::parse(self.simulator.connectivity).expect("validated"),
            seed,
        }
    }
}
