//! Training configuration and its flat `key = value` file format.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::losses::LossParams;
use crate::scene::PhotometricStrengths;
use crate::tensor::AdamConfig;

macro_rules! train_config {
    ($($(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr,)*) => {
        /// Every knob of a translation training run.
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct TrainConfig {
            $($(#[doc = $doc])* pub $name: $ty,)*
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                TrainConfig { $($name: $default,)* }
            }
        }

        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name),)*];

            /// One `key = value` line per field, in declaration order.
            pub fn to_config_string(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($name), self.$name).expect("write to string");)*
                s
            }

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
                match key {
                    $(stringify!($name) => {
                        self.$name = value.parse::<$ty>().map_err(|e| e.to_string())?;
                        Ok(true)
                    })*
                    _ => Ok(false),
                }
            }
        }
    };
}

train_config! {
    steps: usize = 5000,
    /// Images per domain per step.
    batch_size: usize = 4,
    lr: f64 = 1e-4,
    beta1: f64 = 0.1,
    beta2: f64 = 0.999,
    weight_decay: f64 = 7e-5,
    lambda_gan: f64 = 1.0,
    lambda_cycle: f64 = 10.0,
    lambda_prcp: f64 = 0.1,
    gamma: f64 = 2.0,
    alpha: f64 = 0.25,
    delta: f64 = 1.0,
    seed: u64 = 0,
    image_size: usize = 64,
    /// Random square crop, resized back to `image_size`.
    crop_size: usize = 56,
    distort_brightness: f64 = PhotometricStrengths::training().brightness,
    distort_contrast: f64 = PhotometricStrengths::training().contrast,
    distort_saturation: f64 = PhotometricStrengths::training().saturation,
    distort_hue: f64 = PhotometricStrengths::training().hue,
    distort_noise: f64 = PhotometricStrengths::training().noise,
    /// Write a checkpoint every this many steps; 0 writes only the last.
    checkpoint_every: usize = 1000,
    generator_base: usize = 16,
    discriminator_base: usize = 16,
}

impl TrainConfig {
    /// Parse a config file body. Blank lines and `#` comments are skipped;
    /// unknown or repeated keys are errors; absent keys keep defaults.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            match cfg.set(key, value) {
                Ok(true) => {}
                Ok(false) => return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1))),
                Err(e) => {
                    return Err(Error::Config(format!(
                        "line {}: bad value `{value}` for `{key}`: {e}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_config_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config_string()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_params()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.distortion().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.crop_size == 0 || self.crop_size > self.image_size {
            return Err(Error::Config(format!(
                "crop_size {} must be in 1..={}",
                self.crop_size, self.image_size
            )));
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("lr must be positive and betas in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams {
            gamma: self.gamma,
            alpha: self.alpha,
            delta: self.delta,
            lambda_prcp: self.lambda_prcp,
            lambda_cycle: self.lambda_cycle,
            lambda_gan: self.lambda_gan,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn distortion(&self) -> PhotometricStrengths {
        PhotometricStrengths {
            brightness: self.distort_brightness,
            contrast: self.distort_contrast,
            saturation: self.distort_saturation,
            hue: self.distort_hue,
            noise: self.distort_noise,
        }
    }

    pub fn gan_config(&self) -> GanConfig {
        GanConfig {
            image_size: self.image_size,
            generator_base: self.generator_base,
            discriminator_base: self.discriminator_base,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_lossless() {
        let cfg = TrainConfig {
            lr: 0.1 + 0.2,
            lambda_prcp: 1.0 / 3.0,
            seed: u64::MAX,
            ..Default::default()
        };
        let text = cfg.to_config_string();
        assert_eq!(text.lines().count(), TrainConfig::KEYS.len());
        assert_eq!(TrainConfig::from_config_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        let err = TrainConfig::from_config_str("steps = 3\nlearning_rate = 1").unwrap_err();
        assert!(err.to_string().contains("unknown key `learning_rate`"));
        assert!(TrainConfig::from_config_str("steps = 3\nsteps = 4").is_err());
        assert!(TrainConfig::from_config_str("steps = many").is_err());
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = TrainConfig::from_config_str("# run\n\nsteps = 7 # short\n").unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.lambda_cycle, 10.0);
    }
}
