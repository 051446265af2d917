//! Run configuration: JSON file values overridden by command-line flags.

use std::fs;
use std::path::Path;

use kflow::evaluation::{Protocol, DEFAULT_LAMBDA2_GRID};
use kflow::optimizer::TrainConfig;
use kflow::{KflowError, Result};
use serde::{Deserialize, Serialize};

/// Values that may come from a config file. Keys mirror the long flag names.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct PartialConfig {
    pub tau: Option<usize>,
    pub lambda1: Option<f64>,
    pub lambda2_grid: Option<Vec<f64>>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub steps: Option<usize>,
    pub train_fraction: Option<f64>,
    pub n: Option<usize>,
    pub dt: Option<f64>,
}

impl PartialConfig {
    /// Reads a config file. Output artifacts are accepted too: their embedded
    /// `config` object is used.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KflowError::Io(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| KflowError::Data(format!("{}: {e}", path.display())))?;
        let inner = match value.get("config") {
            Some(c) if value.get("kflow_version").is_some() => c.clone(),
            _ => value,
        };
        serde_json::from_value(inner).map_err(|e| KflowError::Data(format!("{}: {e}", path.display())))
    }

    /// Fields set in `over` win.
    pub fn merged(self, over: PartialConfig) -> PartialConfig {
        PartialConfig {
            tau: over.tau.or(self.tau),
            lambda1: over.lambda1.or(self.lambda1),
            lambda2_grid: over.lambda2_grid.or(self.lambda2_grid),
            epochs: over.epochs.or(self.epochs),
            lr: over.lr.or(self.lr),
            batch_size: over.batch_size.or(self.batch_size),
            seed: over.seed.or(self.seed),
            mode: over.mode.or(self.mode),
            steps: over.steps.or(self.steps),
            train_fraction: over.train_fraction.or(self.train_fraction),
            n: over.n.or(self.n),
            dt: over.dt.or(self.dt),
        }
    }
}

/// Fully resolved settings, echoed into every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunConfig {
    pub tau: usize,
    pub lambda1: f64,
    pub lambda2_grid: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub train_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

impl RunConfig {
    pub fn resolve(p: PartialConfig) -> Result<Self> {
        let protocol = Protocol::default();
        let train = TrainConfig::default();
        let cfg = RunConfig {
            tau: p.tau.unwrap_or(protocol.tau),
            lambda1: p.lambda1.unwrap_or(protocol.lambda1),
            lambda2_grid: p.lambda2_grid.unwrap_or_else(|| DEFAULT_LAMBDA2_GRID.to_vec()),
            epochs: p.epochs.unwrap_or(train.epochs),
            lr: p.lr.unwrap_or(train.lr_theta),
            batch_size: p.batch_size.unwrap_or(train.batch_size),
            seed: p.seed.unwrap_or(train.seed),
            train_fraction: p.train_fraction.unwrap_or(protocol.train_fraction),
            mode: p.mode,
            steps: p.steps,
            n: p.n,
            dt: p.dt,
        };
        if cfg.tau == 0 {
            return Err(KflowError::InvalidArgument("--tau must be positive".into()));
        }
        if !(cfg.lambda1 >= 0.0 && cfg.lambda1.is_finite()) {
            return Err(KflowError::InvalidArgument("--lambda1 must be finite and nonnegative".into()));
        }
        if cfg.lambda2_grid.is_empty() {
            return Err(KflowError::InvalidArgument("--lambda2-grid must not be empty".into()));
        }
        cfg.train_config(cfg.lambda2_grid[0]).validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, lambda2: f64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr_theta: self.lr,
            lr_alpha: self.lr,
            batch_size: self.batch_size,
            lambda1: self.lambda1,
            lambda2,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            tau: self.tau,
            lambda1: self.lambda1,
            train_fraction: self.train_fraction,
            lambda2_grid: self.lambda2_grid.clone(),
            train: self.train_config(0.0),
            ..Protocol::default()
        }
    }
}

/// Comma-separated list of numbers.
pub fn parse_grid(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("'{v}' is not a number")))
        .collect()
}
