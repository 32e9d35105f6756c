//! Training configuration as `key = value` text.
//!
//! ```text
//! variant = mtl-base
//! learning_rates = 1e-3, 3e-4
//! batch_size = 2
//! max_epochs = 300
//! patience = 20
//! seed = 7
//! loss_weight_init = 1
//! init_risk_offset = true
//! dropout = 0.3
//! tcn_kernel = 9
//! manifest = data/manifest.txt
//! checkpoint_dir = runs/mtl-base
//! ```
//!
//! `ERGOSEG_SEED` and `ERGOSEG_OUTPUT_DIR` override `seed` and
//! `checkpoint_dir`.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::model::ModelVariant;

pub const SEED_ENV: &str = "ERGOSEG_SEED";
pub const OUTPUT_DIR_ENV: &str = "ERGOSEG_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config key `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub learning_rates: Vec<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss_weight_init: f64,
    /// Start the risk output bias at the mean training target.
    pub init_risk_offset: bool,
    pub dropout: f64,
    /// Temporal kernel size of the segmentation head.
    pub tcn_kernel: usize,
    pub manifest: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::MtlBase,
            learning_rates: vec![1e-3, 3e-4],
            batch_size: 2,
            max_epochs: 300,
            patience: 20,
            seed: 0,
            loss_weight_init: 1.0,
            init_risk_offset: true,
            dropout: 0.3,
            tcn_kernel: 9,
            manifest: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.learning_rates.is_empty() {
            return bad("at least one learning rate is required");
        }
        if self.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.tcn_kernel == 0 {
            return bad("tcn_kernel must be at least 1");
        }
        if !(self.loss_weight_init.is_finite() && self.loss_weight_init > 0.0) {
            return bad("loss_weight_init must be positive");
        }
        Ok(())
    }

    /// Parses `key = value` lines onto the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let err = |msg: String| ConfigError::Value { key: key.into(), msg };
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse `{v}`"))
        }
        match key {
            "variant" => self.variant = value.parse().map_err(|e: crate::model::UnknownVariant| err(e.to_string()))?,
            "learning_rates" | "learning_rate" => {
                self.learning_rates = value
                    .split(',')
                    .map(|s| num::<f64>(s.trim()))
                    .collect::<Result<_, _>>()
                    .map_err(err)?;
            }
            "batch_size" => self.batch_size = num(value).map_err(err)?,
            "max_epochs" => self.max_epochs = num(value).map_err(err)?,
            "patience" => self.patience = num(value).map_err(err)?,
            "seed" => self.seed = num(value).map_err(err)?,
            "loss_weight_init" => self.loss_weight_init = num(value).map_err(err)?,
            "init_risk_offset" => self.init_risk_offset = num(value).map_err(err)?,
            "dropout" => self.dropout = num(value).map_err(err)?,
            "tcn_kernel" => self.tcn_kernel = num(value).map_err(err)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(value)),
            _ => return Err(err("unknown key".into())),
        }
        Ok(())
    }

    /// Applies `ERGOSEG_SEED` / `ERGOSEG_OUTPUT_DIR` from `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(s) = get(SEED_ENV) {
            self.seed = s.trim().parse().map_err(|_| ConfigError::Value {
                key: SEED_ENV.into(),
                msg: format!("cannot parse `{s}`"),
            })?;
        }
        if let Some(d) = get(OUTPUT_DIR_ENV) {
            self.checkpoint_dir = Some(PathBuf::from(d));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let lrs: Vec<String> = self.learning_rates.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "variant = {}", self.variant);
        let _ = writeln!(s, "learning_rates = {}", lrs.join(", "));
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "loss_weight_init = {}", self.loss_weight_init);
        let _ = writeln!(s, "init_risk_offset = {}", self.init_risk_offset);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "tcn_kernel = {}", self.tcn_kernel);
        if let Some(m) = &self.manifest {
            let _ = writeln!(s, "manifest = {}", m.display());
        }
        if let Some(d) = &self.checkpoint_dir {
            let _ = writeln!(s, "checkpoint_dir = {}", d.display());
        }
        s
    }
}
