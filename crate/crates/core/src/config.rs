//! Flat `key = value` run configuration shared by every command.
//!
//! Lines starting with `#` (and anything after a `#`) are comments. Keys not
//! listed in [`RunConfig::KEYS`] are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::PhantomConfig;
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::model::UNetConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    /// Ensemble size.
    pub k: usize,
    /// Seed for the phantom generator and base seed of ensemble members.
    pub seed: u64,
    pub depth: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    /// Train class networks without the lung stage.
    pub flat: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phantom: PhantomConfig::default(),
            train: TrainConfig::default(),
            k: 6,
            seed: 0,
            depth: 3,
            base_channels: 8,
            kernel_size: 3,
            flat: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_range(key: &str, value: &str) -> Result<(f32, f32)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [lo, hi] => Ok((parse(key, lo)?, parse(key, hi)?)),
        _ => Err(Error::config(format!("{key} expects \"lo,hi\", got {value:?}"))),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key} expects true or false, got {value:?}"))),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "k",
        "depth",
        "base_channels",
        "kernel_size",
        "flat",
        "epochs",
        "batch_size",
        "patch_size",
        "learning_rate",
        "lambda",
        "epsilon",
        "class_weights",
        "lnet_loss_weight",
        "augment_flip",
        "n_volumes",
        "n_test_volumes",
        "slices_per_volume",
        "image_size",
        "healthy_intensity",
        "ggo_intensity",
        "con_intensity",
        "body_intensity",
        "noise_sigma",
        "lung_half_width",
        "lung_half_height",
        "max_ggo_blobs",
        "max_con_blobs",
        "blob_radius",
        "rater2_flip_prob",
    ];

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let p = &mut self.phantom;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "flat" => self.flat = parse_bool(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "patch_size" => t.patch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "lambda" => t.loss.lambda = parse(key, value)?,
            "epsilon" => t.loss.epsilon = parse(key, value)?,
            "class_weights" => {
                if value == "auto" {
                    t.auto_class_weights = true;
                } else {
                    t.loss.class_weights = value
                        .split(',')
                        .map(|w| parse(key, w.trim()))
                        .collect::<Result<Vec<f32>>>()?;
                    t.auto_class_weights = false;
                }
            }
            "lnet_loss_weight" => t.lnet_loss_weight = parse(key, value)?,
            "augment_flip" => t.augment_flip = parse_bool(key, value)?,
            "n_volumes" => p.n_volumes = parse(key, value)?,
            "n_test_volumes" => p.n_test_volumes = parse(key, value)?,
            "slices_per_volume" => p.slices_per_volume = parse(key, value)?,
            "image_size" => p.image_size = parse(key, value)?,
            "healthy_intensity" => p.healthy_intensity = parse_range(key, value)?,
            "ggo_intensity" => p.ggo_intensity = parse_range(key, value)?,
            "con_intensity" => p.con_intensity = parse_range(key, value)?,
            "body_intensity" => p.body_intensity = parse_range(key, value)?,
            "noise_sigma" => p.noise_sigma = parse(key, value)?,
            "lung_half_width" => p.lung_half_width = parse_range(key, value)?,
            "lung_half_height" => p.lung_half_height = parse_range(key, value)?,
            "max_ggo_blobs" => p.max_ggo_blobs = parse(key, value)?,
            "max_con_blobs" => p.max_con_blobs = parse(key, value)?,
            "blob_radius" => p.blob_radius = parse_range(key, value)?,
            "rater2_flip_prob" => p.rater2_flip_prob = parse(key, value)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Does not
    /// validate; call [`RunConfig::validate`] once all overrides are in.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults overlaid with the file at `path`, if any.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        let (lnet, cnet) = (self.lnet_config(), self.cnet_config());
        if let Some(l) = lnet {
            l.validate()?;
        }
        cnet.validate()?;
        self.train.validate(cnet.divisor())
    }

    pub fn lnet_config(&self) -> Option<UNetConfig> {
        (!self.flat).then(|| UNetConfig {
            kernel_size: self.kernel_size,
            ..UNetConfig::lung_stage(self.depth, self.base_channels)
        })
    }

    pub fn cnet_config(&self) -> UNetConfig {
        let base = UNetConfig::class_stage(self.depth, self.base_channels);
        UNetConfig {
            kernel_size: self.kernel_size,
            in_channels: if self.flat { 1 } else { base.in_channels },
            ..base
        }
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            seed: self.seed,
            ..self.phantom.clone()
        }
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            k: self.k,
            base_seed: self.seed,
            train: self.train.clone(),
            lnet: self.lnet_config(),
            cnet: self.cnet_config(),
        }
    }

    /// Every key with its current value, in `KEYS` order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let range = |r: (f32, f32)| format!("{},{}", r.0, r.1);
        let p = &self.phantom;
        let t = &self.train;
        let weights = if t.auto_class_weights {
            "auto".to_string()
        } else {
            t.loss.class_weights.iter().map(f32::to_string).collect::<Vec<_>>().join(",")
        };
        let values = [
            self.seed.to_string(),
            self.k.to_string(),
            self.depth.to_string(),
            self.base_channels.to_string(),
            self.kernel_size.to_string(),
            self.flat.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.patch_size.to_string(),
            t.learning_rate.to_string(),
            t.loss.lambda.to_string(),
            t.loss.epsilon.to_string(),
            weights,
            t.lnet_loss_weight.to_string(),
            t.augment_flip.to_string(),
            p.n_volumes.to_string(),
            p.n_test_volumes.to_string(),
            p.slices_per_volume.to_string(),
            p.image_size.to_string(),
            range(p.healthy_intensity),
            range(p.ggo_intensity),
            range(p.con_intensity),
            range(p.body_intensity),
            p.noise_sigma.to_string(),
            range(p.lung_half_width),
            range(p.lung_half_height),
            p.max_ggo_blobs.to_string(),
            p.max_con_blobs.to_string(),
            range(p.blob_radius),
            p.rater2_flip_prob.to_string(),
        ];
        for (key, value) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}
