//! Plain-text `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Optional values accept `none`.

use std::fmt::Write as _;

use indexmap::IndexMap;
use thiserror::Error;

use crate::data::Smoothing;
use crate::losses::LossConfig;
use crate::models::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
}

/// Parse `key=value` lines into an ordered map. Later duplicates win.
pub fn parse_kv(text: &str) -> Result<IndexMap<String, String>, ConfigError> {
    let mut out = IndexMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Model, training and preprocessing settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub smoothing: Smoothing,
}

pub const KEYS: &[&str] = &[
    "arch",
    "width_mult",
    "dropout_p",
    "lr",
    "batch_size",
    "max_epochs",
    "patience",
    "clip_norm",
    "eta_min",
    "weight_decay",
    "seed",
    "dropout_seed",
    "augment",
    "soft_labels",
    "target_f1",
    "val_threshold",
    "pos_weight",
    "dice_eps",
    "gamma",
    "w_bce",
    "w_dice",
    "w_focal",
    "smooth_prev_sigma",
    "smooth_wind_sigma",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "arch" => {
                m.arch = value.parse().map_err(|e: crate::tensor::TensorError| ConfigError::Value {
                    key: key.into(),
                    value: value.into(),
                    reason: e.to_string(),
                })?
            }
            "width_mult" => m.width_mult = parse(key, value)?,
            "dropout_p" => m.dropout_p = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse_opt(key, value)?,
            "eta_min" => t.eta_min = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "dropout_seed" => t.dropout_seed = parse_opt(key, value)?,
            "augment" => t.augment = parse(key, value)?,
            "soft_labels" => t.soft_labels = parse(key, value)?,
            "target_f1" => t.target_f1 = parse_opt(key, value)?,
            "val_threshold" => t.val_threshold = parse(key, value)?,
            "pos_weight" => t.loss.pos_weight = parse(key, value)?,
            "dice_eps" => t.loss.dice_eps = parse(key, value)?,
            "gamma" => t.loss.gamma = parse(key, value)?,
            "w_bce" => t.loss.w_bce = parse(key, value)?,
            "w_dice" => t.loss.w_dice = parse(key, value)?,
            "w_focal" => t.loss.w_focal = parse(key, value)?,
            "smooth_prev_sigma" => self.smoothing.prev_fire_sigma = parse_opt(key, value)?,
            "smooth_wind_sigma" => self.smoothing.wind_speed_sigma = parse_opt(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let l: &LossConfig = &t.loss;
        let pairs: Vec<(&str, String)> = vec![
            ("arch", m.arch.to_string()),
            ("width_mult", m.width_mult.to_string()),
            ("dropout_p", m.dropout_p.to_string()),
            ("lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("clip_norm", opt(t.clip_norm)),
            ("eta_min", t.eta_min.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("seed", t.seed.to_string()),
            ("dropout_seed", opt(t.dropout_seed)),
            ("augment", t.augment.to_string()),
            ("soft_labels", t.soft_labels.to_string()),
            ("target_f1", opt(t.target_f1)),
            ("val_threshold", t.val_threshold.to_string()),
            ("pos_weight", l.pos_weight.to_string()),
            ("dice_eps", l.dice_eps.to_string()),
            ("gamma", l.gamma.to_string()),
            ("w_bce", l.w_bce.to_string()),
            ("w_dice", l.w_dice.to_string()),
            ("w_focal", l.w_focal.to_string()),
            ("smooth_prev_sigma", opt(self.smoothing.prev_fire_sigma)),
            ("smooth_wind_sigma", opt(self.smoothing.wind_speed_sigma)),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}
