//! Training configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! lr = 2e-5
//! fusion_mode = hmode
//! ```
//!
//! Keys: `lr`, `epochs`, `lr_halve_at`, `batch_size`, `k`, `n`, `w_divisor`,
//! `s`, `sigma`, `crop`, `hflip_prob`, `fusion_mode` (hmode|moe|average),
//! `preset` (toy|vgg16bn-shape), `seed`, `precision` (32|64), `max_steps`
//! (0 = unlimited), `save_every` (epochs, 0 = only at the end).

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FusionMode, Preset};
use crate::error::{Error, Result};
use crate::groundtruth::DEFAULT_SIGMA;
use crate::losses::{LossConfig, DEFAULT_HARD_REGIONS};

pub const SEED_ENV: &str = "HMODE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub lr_halve_at: usize,
    pub batch_size: usize,
    pub k: usize,
    pub n: usize,
    pub w_divisor: usize,
    pub s: usize,
    pub sigma: f64,
    pub crop: usize,
    pub hflip_prob: f64,
    pub fusion_mode: FusionMode,
    pub preset: Preset,
    pub seed: u64,
    pub precision: u32,
    pub max_steps: usize,
    pub save_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            epochs: 200,
            lr_halve_at: 100,
            batch_size: 8,
            k: 3,
            n: 2,
            w_divisor: 8,
            s: DEFAULT_HARD_REGIONS,
            sigma: DEFAULT_SIGMA,
            crop: 256,
            hflip_prob: 0.5,
            fusion_mode: FusionMode::Hmode,
            preset: Preset::Toy,
            seed: 0,
            precision: 32,
            max_steps: 0,
            save_every: 0,
        }
    }
}

pub const KEYS: [&str; 17] = [
    "lr",
    "epochs",
    "lr_halve_at",
    "batch_size",
    "k",
    "n",
    "w_divisor",
    "s",
    "sigma",
    "crop",
    "hflip_prob",
    "fusion_mode",
    "preset",
    "seed",
    "precision",
    "max_steps",
    "save_every",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.parse().map_err(|e: V::Err| Error::Config {
        key: key.into(),
        msg: format!("cannot parse `{value}`: {e}"),
    })
}

impl TrainConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr_halve_at" => self.lr_halve_at = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "n" => self.n = parse(key, v)?,
            "w_divisor" => self.w_divisor = parse(key, v)?,
            "s" => self.s = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "crop" => self.crop = parse(key, v)?,
            "hflip_prob" => self.hflip_prob = parse(key, v)?,
            "fusion_mode" => self.fusion_mode = parse(key, v)?,
            "preset" => self.preset = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "save_every" => self.save_every = parse(key, v)?,
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.into(),
                msg: format!("line {} is not `key = value`", i + 1),
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, then applies the `HMODE_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, &v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        KEYS.iter()
            .map(|k| match &json[*k] {
                serde_json::Value::String(s) => format!("{k} = {s}\n"),
                v => format!("{k} = {v}\n"),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.crop == 0 || !self.crop.is_multiple_of(8) {
            return bad("crop", format!("must be a positive multiple of 8, got {}", self.crop));
        }
        if self.w_divisor == 0 || !self.crop.is_multiple_of(self.w_divisor) {
            return bad("w_divisor", format!("{} does not divide crop {}", self.w_divisor, self.crop));
        }
        if self.s == 0 {
            return bad("s", "must be at least 1".into());
        }
        if !(self.sigma > 0.0) {
            return bad("sigma", format!("must be positive, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("hflip_prob", format!("must lie in [0, 1], got {}", self.hflip_prob));
        }
        if self.precision != 32 && self.precision != 64 {
            return bad("precision", format!("must be 32 or 64, got {}", self.precision));
        }
        let backbone = self.backbone();
        backbone.validate().map_err(|e| Error::Config {
            key: "k".into(),
            msg: e.to_string(),
        })?;
        if !self.crop.is_multiple_of(backbone.downsampling()) {
            return bad("crop", format!("must be a multiple of {}", backbone.downsampling()));
        }
        Ok(())
    }

    pub fn region(&self) -> usize {
        self.crop / self.w_divisor
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            region: self.region(),
            hard_regions: self.s,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig::from_preset(self.preset, self.k, self.n)
            .with_fusion(self.fusion_mode)
            .with_input_size(self.crop, self.crop)
    }

    /// Learning rate during 1-based `epoch`: halved once `epoch` passes
    /// `lr_halve_at`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_halve_at {
            self.lr / 2.0
        } else {
            self.lr
        }
    }
}
