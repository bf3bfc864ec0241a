//! Model hyperparameters and run configuration.
//!
//! Run configuration comes from a plain `key = value` file plus
//! command-line overrides, with flags winning. The effective
//! configuration is echoed verbatim so runs are auditable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bins::DistanceBins;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture hyperparameters. The grid fixes d_max: the largest
/// distance representable between two cells of the generation cube.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature width F of atom embeddings and interaction blocks.
    pub features: usize,
    /// Number of interaction blocks.
    pub blocks: usize,
    /// Output distribution bins.
    pub bins: usize,
    /// Radial basis centers feeding the filter networks.
    pub filter_rbf: usize,
    /// Half-width of the generation cube in angstrom.
    pub grid_extent: f64,
    /// Grid points per axis.
    pub grid_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            features: 64,
            blocks: 9,
            bins: 300,
            filter_rbf: 300,
            grid_extent: 4.4,
            grid_steps: 45,
        }
    }
}

impl ModelConfig {
    /// Cube diagonal: the largest cell-to-cell distance on the grid.
    pub fn d_max(&self) -> f64 {
        3.0f64.sqrt() * 2.0 * self.grid_extent
    }

    pub fn label_bins(&self) -> DistanceBins {
        DistanceBins::new(self.bins, self.d_max())
    }

    pub fn filter_bins(&self) -> DistanceBins {
        DistanceBins::new(self.filter_rbf, self.d_max())
    }

    /// Hidden widths of the distribution head: a ramp F -> 2F -> 4F -> bins.
    pub fn head_widths(&self) -> (usize, usize) {
        (2 * self.features, 4 * self.features)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.features == 0 || self.blocks == 0 {
            return Err(ConfigError::Invalid("features and blocks must be >= 1".into()));
        }
        if self.bins < 2 || self.filter_rbf < 2 {
            return Err(ConfigError::Invalid("bins and filter_rbf must be >= 2".into()));
        }
        if self.grid_steps < 2 || self.grid_extent <= 0.0 {
            return Err(ConfigError::Invalid("grid needs >= 2 steps and positive extent".into()));
        }
        Ok(())
    }
}

/// Everything a run needs; parsed from file + flags.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub batch: usize,
    pub iters: u64,
    pub val_interval: u64,
    pub val_samples: usize,
    pub t_train: f64,
    pub t_gen: f64,
    pub threads: usize,
    pub train_fraction: f64,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            seed: 0,
            batch: 20,
            iters: 10_000,
            val_interval: 1000,
            val_samples: 50,
            t_train: 1.0,
            t_gen: 0.01,
            threads: 1,
            train_fraction: 1.0,
            data: None,
            checkpoint: None,
            metrics: None,
        }
    }
}

impl RunConfig {
    /// Apply `key = value` lines from a config file. Unknown keys are
    /// rejected so typos do not silently fall back to defaults.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got {raw:?}"),
            })?;
            self.apply_kv(key.trim(), value.trim())
                .map_err(|message| ConfigError::Parse { line: i + 1, message })?;
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
        }
        match key {
            "features" => self.model.features = num(key, value)?,
            "blocks" => self.model.blocks = num(key, value)?,
            "bins" => self.model.bins = num(key, value)?,
            "filter_rbf" => self.model.filter_rbf = num(key, value)?,
            "grid_extent" => self.model.grid_extent = num(key, value)?,
            "grid_steps" => self.model.grid_steps = num(key, value)?,
            "d_max" => {
                // d_max is derived from the grid; an explicit value must agree.
                let given: f64 = num(key, value)?;
                let derived = self.model.d_max();
                if (given - derived).abs() > 1e-6 {
                    return Err(format!(
                        "d_max {given} inconsistent with grid extent {} (expected {derived:.6})",
                        self.model.grid_extent
                    ));
                }
            }
            "seed" => self.seed = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "iters" => self.iters = num(key, value)?,
            "val_interval" => self.val_interval = num(key, value)?,
            "val_samples" => self.val_samples = num(key, value)?,
            "t_train" => self.t_train = num(key, value)?,
            "t_gen" => self.t_gen = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "metrics" => self.metrics = Some(PathBuf::from(value)),
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(ConfigError::Invalid("batch must be >= 1".into()));
        }
        if self.val_interval == 0 {
            return Err(ConfigError::Invalid("val_interval must be >= 1".into()));
        }
        if self.t_train <= 0.0 || self.t_gen <= 0.0 {
            return Err(ConfigError::Invalid("temperatures must be > 0".into()));
        }
        if self.threads == 0 {
            return Err(ConfigError::Invalid("threads must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(ConfigError::Invalid("train_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// The effective configuration, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        writeln!(s, "features = {}", self.model.features).unwrap();
        writeln!(s, "blocks = {}", self.model.blocks).unwrap();
        writeln!(s, "bins = {}", self.model.bins).unwrap();
        writeln!(s, "filter_rbf = {}", self.model.filter_rbf).unwrap();
        writeln!(s, "grid_extent = {}", self.model.grid_extent).unwrap();
        writeln!(s, "grid_steps = {}", self.model.grid_steps).unwrap();
        writeln!(s, "d_max = {:.6}", self.model.d_max()).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "batch = {}", self.batch).unwrap();
        writeln!(s, "iters = {}", self.iters).unwrap();
        writeln!(s, "val_interval = {}", self.val_interval).unwrap();
        writeln!(s, "val_samples = {}", self.val_samples).unwrap();
        writeln!(s, "t_train = {}", self.t_train).unwrap();
        writeln!(s, "t_gen = {}", self.t_gen).unwrap();
        writeln!(s, "threads = {}", self.threads).unwrap();
        writeln!(s, "train_fraction = {}", self.train_fraction).unwrap();
        if let Some(p) = &self.data {
            writeln!(s, "data = {}", p.display()).unwrap();
        }
        if let Some(p) = &self.checkpoint {
            writeln!(s, "checkpoint = {}", p.display()).unwrap();
        }
        if let Some(p) = &self.metrics {
            writeln!(s, "metrics = {}", p.display()).unwrap();
        }
        s
    }
}
