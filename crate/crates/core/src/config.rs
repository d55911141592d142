//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comment
//! net.blocks = 2
//! loss.lambda_gp = 10
//! train.attention = v3
//! data.split = 0.8, 0.1, 0.1
//! ```
//!
//! Every key has a default; unknown keys and unparsable values are errors.
//! Later assignments win, so command-line overrides are applied after the file.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datapipe::{CropOptions, DEFAULT_COARSE_FACTOR, DEFAULT_CROP, DEFAULT_STRIDE};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

/// Synthetic dataset layout and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub scenes: usize,
    pub size: usize,
    pub crop: usize,
    pub stride: usize,
    pub factor: usize,
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenes: 8,
            size: 256,
            crop: DEFAULT_CROP,
            stride: DEFAULT_STRIDE,
            factor: DEFAULT_COARSE_FACTOR,
            split: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn crop_options(&self) -> CropOptions {
        CropOptions {
            size: self.crop,
            stride: self.stride,
            factor: self.factor,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Generates `set`, `get` and `KEYS` from one table of key/field pairs.
macro_rules! keys {
    ($($key:literal => $($field:ident).+ : $kind:ident),* $(,)?) => {
        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Assigns one dotted key.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => keys!(@set self, key, value, $kind, $($field).+),)*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// Current value of a dotted key, formatted as it would be written.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(keys!(@get self, $kind, $($field).+)),)*
                    _ => None,
                }
            }
        }
    };
    (@set $s:ident, $k:ident, $v:ident, scalar, $($f:ident).+) => { $s.$($f).+ = parse($k, $v)? };
    (@set $s:ident, $k:ident, $v:ident, list, $($f:ident).+) => { $s.$($f).+ = parse_list($k, $v)? };
    (@set $s:ident, $k:ident, $v:ident, triple, $($f:ident).+) => {
        $s.$($f).+ = parse_list::<f64>($k, $v)?
            .try_into()
            .map_err(|_| Error::Config(format!("{} needs three comma-separated values", $k)))?
    };
    (@get $s:ident, scalar, $($f:ident).+) => { $s.$($f).+.to_string() };
    (@get $s:ident, list, $($f:ident).+) => { join(&$s.$($f).+) };
    (@get $s:ident, triple, $($f:ident).+) => { join(&$s.$($f).+) };
}

keys! {
    "net.blocks" => train.net.blocks: scalar,
    "net.channels" => train.net.channels: scalar,
    "net.rdb_layers" => train.net.rdb_layers: scalar,
    "net.rdb_growth" => train.net.rdb_growth: scalar,
    "net.ca_reduction" => train.net.ca_reduction: scalar,
    "net.dilations" => train.net.dilations: list,
    "net.leaky_slope" => train.net.leaky_slope: scalar,
    "net.encoder_mid" => train.net.encoder_mid: scalar,
    "net.decoder_mid" => train.net.decoder_mid: scalar,
    "net.disc_features" => train.net.disc_features: scalar,
    "net.mlp_hidden" => train.net.mlp_hidden: scalar,
    "net.init" => train.net.init: scalar,
    "net.critic_init" => train.net.critic_init: scalar,
    "loss.lambda_gp" => train.loss.lambda_gp: scalar,
    "loss.lambda_sa" => train.loss.lambda_sa: scalar,
    "loss.lambda_da" => train.loss.lambda_da: scalar,
    "loss.lambda_p" => train.loss.lambda_p: scalar,
    "loss.pixel_reduction" => train.loss.pixel_reduction: scalar,
    "train.lr_generator" => train.lr_generator: scalar,
    "train.lr_critic" => train.lr_critic: scalar,
    "train.beta1" => train.beta1: scalar,
    "train.beta2" => train.beta2: scalar,
    "train.adam_eps" => train.adam_eps: scalar,
    "train.batch_size" => train.batch_size: scalar,
    "train.pretrain_epochs" => train.pretrain_epochs: scalar,
    "train.critic_updates_per_gen" => train.critic_updates_per_gen: scalar,
    "train.adversarial_steps" => train.adversarial_steps: scalar,
    "train.seed" => train.seed: scalar,
    "train.attention" => train.attention: scalar,
    "train.conditioning" => train.conditioning: scalar,
    "train.checkpoint_every" => train.checkpoint_every: scalar,
    "train.validate_every" => train.validate_every: scalar,
    "train.val_crops" => train.val_crops: scalar,
    "data.scenes" => data.scenes: scalar,
    "data.size" => data.size: scalar,
    "data.crop" => data.crop: scalar,
    "data.stride" => data.stride: scalar,
    "data.factor" => data.factor: scalar,
    "data.split" => data.split: triple,
    "data.seed" => data.seed: scalar,
}

impl RunConfig {
    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not `key=value`")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let d = &self.data;
        if d.scenes == 0 || d.crop == 0 || d.stride == 0 || d.factor == 0 {
            return Err(Error::Config("data.scenes, data.crop, data.stride and data.factor must be positive".into()));
        }
        if d.crop > d.size || d.size % d.factor != 0 || d.crop % d.factor != 0 {
            return Err(Error::Config(format!(
                "data.crop ({}) must fit data.size ({}) and both must be multiples of data.factor ({})",
                d.crop, d.size, d.factor
            )));
        }
        Ok(())
    }
}
