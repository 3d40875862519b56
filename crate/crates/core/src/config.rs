//! Key-value run configuration (`key = value` per line, `#` comments).
//!
//! Keys are the field names of [`ModelConfig`] and [`TrainConfig`] plus the
//! data keys `train_ratio`, `val_ratio`, `test_ratio`, `include_zeros` and
//! `interval_minutes`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::SplitRatios;
use crate::error::{config, Result};
use crate::model::{ModelConfig, Variant};
use crate::training::TrainConfig;

pub const KEYS: &[&str] = &[
    "hidden",
    "layers",
    "cheb_order",
    "embed_dim",
    "prototypes",
    "memory_dim",
    "horizon",
    "lookback",
    "variant",
    "hyper_bias",
    "lr",
    "batch",
    "max_epochs",
    "patience",
    "kappa1",
    "kappa2",
    "margin",
    "seed",
    "grad_clip",
    "deterministic",
    "mask_zeros",
    "train_ratio",
    "val_ratio",
    "test_ratio",
    "include_zeros",
    "interval_minutes",
];

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config(format!("line {}: expected `key = value`, got {raw:?}", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(config(format!("line {}: empty key", no + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn load_kv(path: &Path) -> Result<Vec<(String, String)>> {
    parse_kv(&std::fs::read_to_string(path)?)
}

/// Model, training and data settings before the dataset fixes `n_nodes`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Unset window lengths default from the data interval: 12 steps at
    /// 5 minutes or finer, 6 otherwise.
    pub lookback: Option<usize>,
    pub horizon: Option<usize>,
    pub train: TrainConfig,
    pub ratios: SplitRatios,
    pub include_zeros: bool,
    pub interval_minutes: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(0, Variant::Mega),
            lookback: None,
            horizon: None,
            train: TrainConfig::default(),
            ratios: SplitRatios::default(),
            include_zeros: true,
            interval_minutes: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| config(format!("bad value {value:?} for {key}: {e}")))
}

fn opt_str<T: Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "hidden" => m.hidden = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "cheb_order" => m.cheb_order = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "prototypes" => m.prototypes = parse(key, value)?,
            "memory_dim" => m.memory_dim = parse(key, value)?,
            "horizon" => self.horizon = Some(parse(key, value)?),
            "lookback" => self.lookback = Some(parse(key, value)?),
            "variant" => m.variant = value.parse()?,
            "hyper_bias" => m.hyper_bias = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "kappa1" => t.kappa1 = parse(key, value)?,
            "kappa2" => t.kappa2 = parse(key, value)?,
            "margin" => t.margin = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "grad_clip" => {
                t.grad_clip = match value {
                    "none" | "off" | "0" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "deterministic" => t.deterministic = parse(key, value)?,
            "mask_zeros" => t.mask_zeros = parse(key, value)?,
            "train_ratio" => self.ratios.train = parse(key, value)?,
            "val_ratio" => self.ratios.val = parse(key, value)?,
            "test_ratio" => self.ratios.test = parse(key, value)?,
            "include_zeros" => self.include_zeros = parse(key, value)?,
            "interval_minutes" => self.interval_minutes = parse(key, value)?,
            other => {
                return Err(config(format!("unknown configuration key {other:?}; known keys: {}", KEYS.join(", "))));
            }
        }
        Ok(())
    }

    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = &'a (String, String)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Model config for a dataset with `n_nodes` nodes sampled every
    /// `interval` minutes, validated.
    pub fn resolve(&self, n_nodes: usize, interval: u32) -> Result<(ModelConfig, TrainConfig)> {
        let default_window = if interval <= 5 { 12 } else { 6 };
        let model = ModelConfig {
            n_nodes,
            lookback: self.lookback.unwrap_or(default_window),
            horizon: self.horizon.unwrap_or(default_window),
            ..self.model.clone()
        };
        model.validate()?;
        // a patience longer than the run can never trigger, so capping it
        // changes nothing and lets short runs keep the default
        let mut train = self.train.clone();
        train.patience = train.patience.min(train.max_epochs);
        train.validate()?;
        Ok((model, train))
    }

    /// Every key with its current value; feeding the result back through
    /// [`RunConfig::apply`] reproduces `self`.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let t = &self.train;
        let pairs: Vec<(&str, String)> = vec![
            ("hidden", m.hidden.to_string()),
            ("layers", m.layers.to_string()),
            ("cheb_order", m.cheb_order.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("prototypes", m.prototypes.to_string()),
            ("memory_dim", m.memory_dim.to_string()),
            ("variant", m.variant.to_string()),
            ("hyper_bias", m.hyper_bias.to_string()),
            ("lr", t.lr.to_string()),
            ("batch", t.batch.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("kappa1", t.kappa1.to_string()),
            ("kappa2", t.kappa2.to_string()),
            ("margin", t.margin.to_string()),
            ("seed", t.seed.to_string()),
            ("grad_clip", opt_str(t.grad_clip)),
            ("deterministic", t.deterministic.to_string()),
            ("mask_zeros", t.mask_zeros.to_string()),
            ("train_ratio", self.ratios.train.to_string()),
            ("val_ratio", self.ratios.val.to_string()),
            ("test_ratio", self.ratios.test.to_string()),
            ("include_zeros", self.include_zeros.to_string()),
            ("interval_minutes", self.interval_minutes.to_string()),
        ];
        let mut map: BTreeMap<String, String> = pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        if let Some(l) = self.lookback {
            map.insert("lookback".into(), l.to_string());
        }
        if let Some(h) = self.horizon {
            map.insert("horizon".into(), h.to_string());
        }
        map
    }

    pub fn to_kv_text(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
