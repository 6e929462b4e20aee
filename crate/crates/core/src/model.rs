//! A trained encoder/refiner pair and its checkpoint directory layout.

use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::encoder::{automatic_mask, Encoder, EncoderOutput};
use crate::error::Result;
use crate::refiner::{Ablation, ClickSet, Refiner};
use crate::tensor::{read_checkpoint, write_checkpoint};
use crate::volume::{LabelMask, Volume};

pub const ENCODER_FILE: &str = "encoder.ckpt";

/// `refiner.ckpt` for the full model, `refiner-<ablation>.ckpt` otherwise.
pub fn refiner_file(ablation: Ablation) -> String {
    if ablation == Ablation::NONE {
        "refiner.ckpt".into()
    } else {
        format!("refiner-{}.ckpt", ablation.name())
    }
}

pub fn encoder_path(dir: &Path) -> PathBuf {
    dir.join(ENCODER_FILE)
}

pub fn refiner_path(dir: &Path, ablation: Ablation) -> PathBuf {
    dir.join(refiner_file(ablation))
}

pub fn load_encoder(dir: &Path, cfg: &Config) -> Result<Encoder> {
    Encoder::from_params(cfg.encoder_config(), &read_checkpoint(&encoder_path(dir))?)
}

pub fn save_encoder(dir: &Path, encoder: &Encoder) -> Result<()> {
    write_checkpoint(&encoder_path(dir), encoder.params())
}

pub fn save_refiner(dir: &Path, refiner: &Refiner) -> Result<()> {
    write_checkpoint(&refiner_path(dir, refiner.config().ablation), refiner.params())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub refiner: Refiner,
}

impl Model {
    pub fn load(dir: &Path, cfg: &Config, ablation: Ablation) -> Result<Self> {
        let encoder = load_encoder(dir, cfg)?;
        let params = read_checkpoint(&refiner_path(dir, ablation))?;
        let refiner = Refiner::from_params(cfg.refiner_config(ablation), &params)?;
        Ok(Self { encoder, refiner })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_encoder(dir, &self.encoder)?;
        save_refiner(dir, &self.refiner)
    }

    pub fn classes(&self) -> usize {
        self.encoder.config().classes
    }

    pub fn encode(&self, volume: &Volume) -> Result<(EncoderOutput, LabelMask)> {
        let out = self.encoder.encode(volume)?;
        let auto = automatic_mask(&out);
        Ok((out, auto))
    }

    /// Masks after each prefix of `clicks`, starting with the automatic mask.
    pub fn replay(&self, volume: &Volume, clicks: &ClickSet) -> Result<Vec<LabelMask>> {
        let (out, auto) = self.encode(volume)?;
        let mut masks = vec![auto];
        let mut prefix = ClickSet::default();
        for &c in clicks.iter() {
            prefix.push(c);
            masks.push(self.refiner.refine(&out, &prefix)?);
        }
        Ok(masks)
    }
}
