//! Flat `key=value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key must be
//! known; values given on the command line are applied after the file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{parse_blocks, ModelConfig};
use crate::train::TrainConfig;

pub const KEYS: [&str; 10] = [
    "learning_rate",
    "batch_size",
    "max_epochs",
    "image_size",
    "fab_ratio",
    "use_fab",
    "freeze_backbone",
    "head_hidden",
    "blocks",
    "seed",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    /// `num_classes` is filled in from the dataset.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_size(v: &str) -> Option<(usize, usize)> {
    match v.split_once('x') {
        Some((h, w)) => Some((h.trim().parse().ok()?, w.trim().parse().ok()?)),
        None => {
            let s = v.parse().ok()?;
            Some((s, s))
        }
    }
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Sets one key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = || Error::Config(format!("invalid value for {key}: {value:?}"));
        match key.trim() {
            "learning_rate" => self.train.learning_rate = value.parse().map_err(|_| bad())?,
            "batch_size" => self.train.batch_size = value.parse().map_err(|_| bad())?,
            "max_epochs" => self.train.max_epochs = value.parse().map_err(|_| bad())?,
            "seed" => self.train.seed = value.parse().map_err(|_| bad())?,
            "image_size" => self.model.input_size = parse_size(value).ok_or_else(bad)?,
            "fab_ratio" => self.model.fab_ratio = value.parse().map_err(|_| bad())?,
            "use_fab" => self.model.use_fab = value.parse().map_err(|_| bad())?,
            "freeze_backbone" => self.model.freeze_backbone = value.parse().map_err(|_| bad())?,
            "head_hidden" => self.model.head_hidden = value.parse().map_err(|_| bad())?,
            "blocks" => self.model.blocks = parse_blocks(value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key {other:?} (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` string.
    pub fn apply_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.apply(k, v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Defaults, then `file` if given, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        for o in overrides {
            cfg.apply_pair(o)?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}
