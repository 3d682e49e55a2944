//! Run configuration as a flat `key = value` text file.
//!
//! A file may start from a preset (`preset = toy` or `preset = paper`);
//! later lines override it. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::DEFAULT_LAMBDA_ADV;
use crate::patch::PatchGrid;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub disc_hidden: Vec<usize>,
    pub lambda_adv: f64,
    pub base_lr: f64,
    pub llrd_decay: f64,
    pub pretrain_lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub mask_ratio: f64,
    pub freeze_discriminator: bool,
    pub seed: u64,
    /// `none`, `rice1` or `rice2`; `none` reads the split from the manifest.
    pub rice_variant: String,
    pub data_dir: String,
    pub out_dir: String,
}

/// Every accepted key, in file order.
pub const KEYS: &[&str] = &[
    "preset",
    "image_size",
    "patch_size",
    "enc_dim",
    "enc_depth",
    "enc_heads",
    "dec_dim",
    "dec_depth",
    "dec_heads",
    "disc_hidden",
    "lambda_adv",
    "base_lr",
    "llrd_decay",
    "pretrain_lr",
    "batch_size",
    "pretrain_epochs",
    "finetune_epochs",
    "mask_ratio",
    "freeze_discriminator",
    "seed",
    "rice_variant",
    "data_dir",
    "out_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

impl RunConfig {
    pub fn toy() -> Self {
        let g = GeneratorConfig::toy();
        RunConfig {
            preset: "toy".into(),
            image_size: g.grid.image_size,
            patch_size: g.grid.patch_size,
            enc_dim: g.enc_dim,
            enc_depth: g.enc_depth,
            enc_heads: g.enc_heads,
            dec_dim: g.dec_dim,
            dec_depth: g.dec_depth,
            dec_heads: g.dec_heads,
            disc_hidden: vec![512, 256],
            lambda_adv: DEFAULT_LAMBDA_ADV,
            base_lr: TrainConfig::default().base_lr,
            llrd_decay: TrainConfig::default().llrd_decay,
            pretrain_lr: 1e-4,
            batch_size: TrainConfig::default().batch_size,
            pretrain_epochs: 10,
            finetune_epochs: 30,
            mask_ratio: 0.75,
            freeze_discriminator: false,
            seed: 0,
            rice_variant: "none".into(),
            data_dir: "data".into(),
            out_dir: "runs".into(),
        }
    }

    pub fn paper() -> Self {
        let g = GeneratorConfig::paper();
        RunConfig {
            preset: "paper".into(),
            image_size: g.grid.image_size,
            patch_size: g.grid.patch_size,
            enc_dim: g.enc_dim,
            enc_depth: g.enc_depth,
            enc_heads: g.enc_heads,
            dec_dim: g.dec_dim,
            dec_depth: g.dec_depth,
            dec_heads: g.dec_heads,
            base_lr: 1e-4,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.trim() {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected toy or paper"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => *self = Self::preset(v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "enc_dim" => self.enc_dim = parse(key, v)?,
            "enc_depth" => self.enc_depth = parse(key, v)?,
            "enc_heads" => self.enc_heads = parse(key, v)?,
            "dec_dim" => self.dec_dim = parse(key, v)?,
            "dec_depth" => self.dec_depth = parse(key, v)?,
            "dec_heads" => self.dec_heads = parse(key, v)?,
            "disc_hidden" => self.disc_hidden = parse_list(key, v)?,
            "lambda_adv" => self.lambda_adv = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "llrd_decay" => self.llrd_decay = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "freeze_discriminator" => self.freeze_discriminator = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "rice_variant" => {
                if !matches!(v, "none" | "rice1" | "rice2") {
                    return Err(Error::Config(format!("rice_variant must be none, rice1 or rice2, got {v:?}")));
                }
                self.rice_variant = v.into()
            }
            "data_dir" => self.data_dir = v.into(),
            "out_dir" => self.out_dir = v.into(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "preset" => self.preset.clone(),
            "image_size" => self.image_size.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "enc_dim" => self.enc_dim.to_string(),
            "enc_depth" => self.enc_depth.to_string(),
            "enc_heads" => self.enc_heads.to_string(),
            "dec_dim" => self.dec_dim.to_string(),
            "dec_depth" => self.dec_depth.to_string(),
            "dec_heads" => self.dec_heads.to_string(),
            "disc_hidden" => self.disc_hidden.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
            "lambda_adv" => self.lambda_adv.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "llrd_decay" => self.llrd_decay.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "finetune_epochs" => self.finetune_epochs.to_string(),
            "mask_ratio" => self.mask_ratio.to_string(),
            "freeze_discriminator" => self.freeze_discriminator.to_string(),
            "seed" => self.seed.to_string(),
            "rice_variant" => self.rice_variant.clone(),
            "data_dir" => self.data_dir.clone(),
            "out_dir" => self.out_dir.clone(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::toy();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("listed key"))).collect()
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_size, self.patch_size, 3)
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        let c = GeneratorConfig {
            grid: self.grid()?,
            enc_dim: self.enc_dim,
            enc_depth: self.enc_depth,
            enc_heads: self.enc_heads,
            dec_dim: self.dec_dim,
            dec_depth: self.dec_depth,
            dec_heads: self.dec_heads,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn discriminator(&self) -> Result<DiscriminatorConfig> {
        let c = DiscriminatorConfig { grid: self.grid()?, hidden_dims: self.disc_hidden.clone() };
        c.validate()?;
        Ok(c)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            llrd_decay: self.llrd_decay,
            batch_size: self.batch_size,
            lambda_adv: self.lambda_adv,
            freeze_discriminator: self.freeze_discriminator,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::toy();
        c.disc_hidden = vec![];
        c.mask_ratio = 0.5;
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        let p = RunConfig::paper();
        assert_eq!(RunConfig::from_text(&p.to_text()).unwrap(), p);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_text("enc_dims = 3").unwrap_err();
        assert!(err.to_string().contains("enc_dims"), "{err}");
        assert!(RunConfig::from_text("seed 3").is_err());
        assert!(RunConfig::from_text("seed = x").is_err());
    }

    #[test]
    fn preset_then_overrides() {
        let c = RunConfig::from_text("# comment\npreset = paper\nbatch_size = 2 # inline\n").unwrap();
        assert_eq!(c.enc_dim, 1024);
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.generator().unwrap(), GeneratorConfig::paper());
    }

    #[test]
    fn every_key_is_gettable_and_settable() {
        let mut c = RunConfig::toy();
        for k in KEYS {
            let v = c.get(k).unwrap();
            c.set(k, &v).unwrap();
        }
        assert_eq!(c, RunConfig::toy());
    }
}
