//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! stations = "stations.csv"
//! observations = "observations.csv"
//!
//! [model]
//! layers = 4
//!
//! [train]
//! batch_size = 32
//! ```
//!
//! Every key is optional; missing keys take the library defaults. Relative
//! paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitSpec, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_KNN_K;
use crate::model::ModelConfig;
use crate::physics::DiffusionConfig;
use crate::stations::DEFAULT_DELTA;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub stations: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub delta: f64,
    /// Kernel width; defaults to the standard deviation of normalized
    /// distances.
    pub gamma: Option<f64>,
    pub test_months: Vec<u32>,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let split = SplitSpec::default();
        Self {
            stations: None,
            observations: None,
            delta: DEFAULT_DELTA,
            gamma: None,
            test_months: split.test_months,
            val_fraction: split.val_fraction,
        }
    }
}

impl DataConfig {
    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            test_months: self.test_months.clone(),
            val_fraction: self.val_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Station count for a generated layout when no stations file is given.
    pub n_stations: usize,
    #[serde(flatten)]
    pub synthetic: SyntheticConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            n_stations: 36,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { knn_k: DEFAULT_KNN_K }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub physics: DiffusionConfig,
    pub simulate: SimulateConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    /// Reads and validates a config file, resolving relative paths against
    /// its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.stations, &mut cfg.data.observations].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.train.seed = seed;
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.split().validate()?;
        if !(self.data.delta > 0.0 && self.data.delta <= 1.0) {
            return Err(Error::Config(format!("data.delta must be in (0, 1], got {}", self.data.delta)));
        }
        if self.eval.knn_k == 0 {
            return Err(Error::Config("eval.knn_k must be ≥ 1".into()));
        }
        self.physics
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Canonical TOML of the effective configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
