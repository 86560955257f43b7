//! Run configuration as a flat key-value file with dotted keys.
//!
//! ```text
//! train.batch_size = 8
//! train.lr_initial = 1e-3
//! loss.alpha = 0.02
//! model.widths = [16, 32, 64, 128]
//! ```
//!
//! The syntax is TOML, so `[loss]` tables work too. Every key has a
//! default; unknown keys and bad values are all reported at once.
//! Environment variables named `LESIONSEG_<KEY>` with `.` written as `__`
//! (e.g. `LESIONSEG_LOSS__ALPHA=0`) override file values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{AugmentationConfig, CropMode};
use crate::losses::ContrastiveConfig;
use crate::nn::{AdamConfig, BackboneDescriptor};
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "LESIONSEG_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Side length every training image is brought to.
    pub input_size: usize,
    pub grid_n: usize,
    pub contrastive: ContrastiveConfig,
    pub backbone: BackboneDescriptor,
    pub adam: AdamConfig,
    pub bank_capacity: usize,
    /// Per-class cap on features drawn from the bank each step.
    pub bank_sample_cap: usize,
    pub augmentation: Option<AugmentationConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr_initial: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_every: 80,
            epochs: 240,
            seed: 0,
            input_size: 256,
            grid_n: 16,
            contrastive: ContrastiveConfig::default(),
            backbone: BackboneDescriptor::default(),
            adam: AdamConfig::default(),
            bank_capacity: 1024,
            bank_sample_cap: 64,
            augmentation: Some(AugmentationConfig::default()),
        }
    }
}

fn as_f64(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(f) => Some(*f),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_usize(v: &toml::Value) -> Option<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Some(*i as usize),
        _ => None,
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Parses a bare value the way it would appear on the right of `=`;
/// anything that is not valid TOML is taken as a string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl TrainConfig {
    /// All recognised keys.
    pub const KEYS: &'static [&'static str] = &[
        "train.batch_size",
        "train.lr_initial",
        "train.lr_decay_factor",
        "train.lr_decay_every",
        "train.epochs",
        "train.seed",
        "train.input_size",
        "patch.grid_n",
        "loss.tau",
        "loss.alpha",
        "loss.beta",
        "bank.capacity",
        "bank.sample_cap",
        "model.in_channels",
        "model.widths",
        "adam.beta1",
        "adam.beta2",
        "adam.eps",
        "adam.weight_decay",
        "augment.enabled",
        "augment.flip_prob",
        "augment.rotation_min",
        "augment.rotation_max",
        "augment.brightness_min",
        "augment.brightness_max",
        "augment.contrast_min",
        "augment.contrast_max",
        "augment.crop",
    ];

    fn augmentation_mut(&mut self) -> &mut AugmentationConfig {
        let size = self.input_size;
        self.augmentation.get_or_insert_with(|| AugmentationConfig {
            output_size: size,
            ..AugmentationConfig::default()
        })
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &toml::Value) -> std::result::Result<(), String> {
        let bad = |what: &str| format!("{key}: expected {what}, got {value}");
        let f = || as_f64(value).ok_or_else(|| bad("a number"));
        let u = || as_usize(value).ok_or_else(|| bad("a non-negative integer"));
        match key {
            "train.batch_size" => self.batch_size = u()?,
            "train.lr_initial" => self.lr_initial = f()?,
            "train.lr_decay_factor" => self.lr_decay_factor = f()?,
            "train.lr_decay_every" => self.lr_decay_every = u()?,
            "train.epochs" => self.epochs = u()?,
            "train.seed" => self.seed = u()? as u64,
            "train.input_size" => self.input_size = u()?,
            "patch.grid_n" => self.grid_n = u()?,
            "loss.tau" => self.contrastive.temperature = f()?,
            "loss.alpha" => self.contrastive.alpha = f()?,
            "loss.beta" => self.contrastive.beta = f()?,
            "bank.capacity" => self.bank_capacity = u()?,
            "bank.sample_cap" => self.bank_sample_cap = u()?,
            "model.in_channels" => self.backbone.in_channels = u()?,
            "model.widths" => {
                let arr = value.as_array().ok_or_else(|| bad("an array of integers"))?;
                self.backbone.widths = arr
                    .iter()
                    .map(|v| as_usize(v).ok_or_else(|| bad("an array of integers")))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "adam.beta1" => self.adam.beta1 = f()? as f32,
            "adam.beta2" => self.adam.beta2 = f()? as f32,
            "adam.eps" => self.adam.eps = f()? as f32,
            "adam.weight_decay" => self.adam.weight_decay = f()? as f32,
            "augment.enabled" => {
                let on = value.as_bool().ok_or_else(|| bad("true or false"))?;
                if on {
                    self.augmentation_mut();
                } else {
                    self.augmentation = None;
                }
            }
            "augment.flip_prob" => self.augmentation_mut().horizontal_flip_prob = f()?,
            "augment.rotation_min" => self.augmentation_mut().rotation_range_degrees.0 = f()?,
            "augment.rotation_max" => self.augmentation_mut().rotation_range_degrees.1 = f()?,
            "augment.brightness_min" => self.augmentation_mut().brightness_scale_range.0 = f()?,
            "augment.brightness_max" => self.augmentation_mut().brightness_scale_range.1 = f()?,
            "augment.contrast_min" => self.augmentation_mut().contrast_scale_range.0 = f()?,
            "augment.contrast_max" => self.augmentation_mut().contrast_scale_range.1 = f()?,
            "augment.crop" => {
                self.augmentation_mut().crop = match value.as_str() {
                    Some("center") => CropMode::Center,
                    Some("random") => CropMode::Random,
                    _ => return Err(bad("\"center\" or \"random\"")),
                }
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Every semantic problem with the configuration.
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            errs.push("train.epochs must be >= 1".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            errs.push(format!("train.lr_initial must be > 0, got {}", self.lr_initial));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            errs.push(format!("train.lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.lr_decay_every == 0 {
            errs.push("train.lr_decay_every must be >= 1".into());
        }
        if self.grid_n == 0 {
            errs.push("patch.grid_n must be >= 1".into());
        }
        errs.extend(self.contrastive.validate());
        if let Err(e) = self.backbone.validate() {
            errs.push(format!("model: {e}"));
        } else {
            let m = self.backbone.size_multiple();
            if self.input_size == 0 || !self.input_size.is_multiple_of(m) {
                errs.push(format!(
                    "train.input_size {} must be a positive multiple of {m} for this backbone",
                    self.input_size
                ));
            }
        }
        if self.grid_n > 0 && !self.input_size.is_multiple_of(self.grid_n) {
            errs.push(format!(
                "train.input_size {} is not divisible by patch.grid_n {}",
                self.input_size, self.grid_n
            ));
        }
        if let Some(a) = &self.augmentation {
            errs.extend(a.validate());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    /// Applies `key = value` pairs, collecting every failure.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a toml::Value)>) -> Vec<String> {
        let mut errs = Vec::new();
        for (k, v) in pairs {
            if let Err(e) = self.set(k, v) {
                errs.push(e);
            }
        }
        errs
    }

    /// Parses a configuration text on top of the defaults.
    pub fn from_str_with_env(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(vec![format!("syntax: {e}")]))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        for (name, raw) in env {
            if let Some(rest) = name.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase().replace("__", ".");
                flat.insert(key, parse_value(&raw));
            }
        }
        let mut config = TrainConfig::default();
        // augment.enabled must land before the other augment.* keys
        let mut ordered: Vec<_> = flat.iter().collect();
        ordered.sort_by_key(|(k, _)| (k.as_str() != "augment.enabled", k.as_str() != "train.input_size"));
        let mut errs = config.apply(ordered.into_iter().map(|(k, v)| (k.as_str(), v)));
        if let Some(a) = config.augmentation.as_mut() {
            a.output_size = config.input_size;
        }
        errs.extend(config.problems());
        if errs.is_empty() {
            Ok(config)
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_str_with_env(text, std::iter::empty())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_with_env(&text, std::env::vars())
    }

    /// Flat `key = value` rendering that parses back to the same config.
    pub fn to_flat_string(&self) -> String {
        let mut lines = vec![
            format!("train.batch_size = {}", self.batch_size),
            format!("train.lr_initial = {:?}", self.lr_initial),
            format!("train.lr_decay_factor = {:?}", self.lr_decay_factor),
            format!("train.lr_decay_every = {}", self.lr_decay_every),
            format!("train.epochs = {}", self.epochs),
            format!("train.seed = {}", self.seed),
            format!("train.input_size = {}", self.input_size),
            format!("patch.grid_n = {}", self.grid_n),
            format!("loss.tau = {:?}", self.contrastive.temperature),
            format!("loss.alpha = {:?}", self.contrastive.alpha),
            format!("loss.beta = {:?}", self.contrastive.beta),
            format!("bank.capacity = {}", self.bank_capacity),
            format!("bank.sample_cap = {}", self.bank_sample_cap),
            format!("model.in_channels = {}", self.backbone.in_channels),
            format!("model.widths = {:?}", self.backbone.widths),
            format!("adam.beta1 = {:?}", self.adam.beta1 as f64),
            format!("adam.beta2 = {:?}", self.adam.beta2 as f64),
            format!("adam.eps = {:?}", self.adam.eps as f64),
            format!("adam.weight_decay = {:?}", self.adam.weight_decay as f64),
            format!("augment.enabled = {}", self.augmentation.is_some()),
        ];
        if let Some(a) = &self.augmentation {
            lines.extend([
                format!("augment.flip_prob = {:?}", a.horizontal_flip_prob),
                format!("augment.rotation_min = {:?}", a.rotation_range_degrees.0),
                format!("augment.rotation_max = {:?}", a.rotation_range_degrees.1),
                format!("augment.brightness_min = {:?}", a.brightness_scale_range.0),
                format!("augment.brightness_max = {:?}", a.brightness_scale_range.1),
                format!("augment.contrast_min = {:?}", a.contrast_scale_range.0),
                format!("augment.contrast_max = {:?}", a.contrast_scale_range.1),
                format!(
                    "augment.crop = \"{}\"",
                    match a.crop {
                        CropMode::Center => "center",
                        CropMode::Random => "random",
                    }
                ),
            ]);
        }
        lines.join("\n") + "\n"
    }
}
