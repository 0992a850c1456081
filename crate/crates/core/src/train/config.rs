use std::fmt::Write as _;
use std::path::Path;

use super::split::SplitMode;
use crate::audio_branch::{VariantConfig, VariantKind, DEFAULT_CHANNELS};
use crate::error::{ensure, Error, Result};

/// Experiment settings read from `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: VariantConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation-AUC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub lr0: f64,
    pub momentum: f64,
    pub decay: f64,
    pub split_mode: SplitMode,
    pub cnn_channels: Vec<usize>,
    /// Score above which a pair counts as predicted liked.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: VariantConfig::metric(1, 3.0),
            batch_size: 32,
            epochs: 20,
            patience: 5,
            seed: 0,
            lr0: 0.1,
            momentum: 0.9,
            decay: 1e-6,
            split_mode: SplitMode::PerUser,
            cnn_channels: DEFAULT_CHANNELS.to_vec(),
            threshold: 0.0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("`{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "variant" => self.variant.kind = value.parse::<VariantKind>()?,
            "n_negatives" => self.variant.n_negatives = num(key, value)?,
            "margin" => self.variant.margin = num(key, value)?,
            "context_duration_s" => self.variant.context_duration = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lr0" => self.lr0 = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "decay" => self.decay = num(key, value)?,
            "split_mode" => self.split_mode = value.parse()?,
            "threshold" => self.threshold = num(key, value)?,
            "cnn_channels" => {
                self.cnn_channels = value
                    .split(',')
                    .map(|c| num(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::Parse(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by every `key = value` line of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        ensure!(self.batch_size >= 1, Contract, "batch_size must be at least 1");
        ensure!(self.cnn_channels.len() == 5, Contract, "cnn_channels needs 5 widths");
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v = &self.variant;
        let _ = writeln!(s, "variant = {}", v.kind);
        let _ = writeln!(s, "n_negatives = {}", v.n_negatives);
        let _ = writeln!(s, "margin = {}", v.margin);
        let _ = writeln!(s, "context_duration_s = {}", v.context_duration);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lr0 = {}", self.lr0);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "decay = {}", self.decay);
        let mode = match self.split_mode {
            SplitMode::PerUser => "per_user",
            SplitMode::DisjointUsers => "disjoint_users",
        };
        let _ = writeln!(s, "split_mode = {mode}");
        let chans: Vec<String> = self.cnn_channels.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "cnn_channels = {}", chans.join(","));
        let _ = writeln!(s, "threshold = {}", self.threshold);
        s
    }
}
