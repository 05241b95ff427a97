//! The study configuration shared by every subcommand. Any section may be omitted from the
//! JSON file; missing sections take the desk-scale defaults below.

use std::fs;
use std::path::Path;

use condshape_core::dataset::DatasetConfig;
use condshape_core::synthgen::{DomainConfig, PhantomRanges};
use condshape_models::{ShapeConfig, ShapeTrainConfig, UNetConfig, UNetTrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Shares of the target training pool, ascending.
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Validation share of each subsample (rounded up, at least one case).
    pub valid_fraction: f64,
}

impl Default for SweepConfig {
    /// Pool shares 1/16, 1/4 and 1: 4, 16 and 64 cases of the default 64-case pool.
    fn default() -> Self {
        Self { fractions: vec![0.0625, 0.25, 1.0], seeds: vec![0, 1, 2], valid_fraction: 0.05 }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() || self.seeds.is_empty() {
            return Err(CliError::Config("sweep needs at least one fraction and one seed".into()));
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(CliError::Config("fractions must lie in (0, 1]".into()));
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Config("fractions must be strictly ascending".into()));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(CliError::Config("valid_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    /// Default seed of training commands (`--seed` overrides).
    pub seed: u64,
    /// Edge-map sharpness of the `edge-map` command.
    pub lambda: f64,
    pub source_data: DatasetConfig,
    /// Target dataset; its first `test_cases` cases are the fixed test split, the rest is the
    /// training pool.
    pub target_data: DatasetConfig,
    pub test_cases: usize,
    pub edge_net: UNetConfig,
    pub edge_train: UNetTrainConfig,
    pub baseline_net: UNetConfig,
    pub baseline_train: UNetTrainConfig,
    pub shape_net: ShapeConfig,
    pub shape_train: ShapeTrainConfig,
    pub sweep: SweepConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let data = |n_cases, domain, seed| DatasetConfig {
            n_cases,
            dims: [32; 3],
            spacing_mm: [1.0; 3],
            domain,
            ranges: PhantomRanges::default(),
            seed,
        };
        Self {
            seed: 0,
            lambda: 2.0,
            source_data: data(220, DomainConfig::source(), 1),
            target_data: data(84, DomainConfig::target(), 2),
            test_cases: 20,
            edge_net: UNetConfig::edge_detector(),
            edge_train: UNetTrainConfig { epochs: 40, patches_per_epoch: 32, ..UNetTrainConfig::edge_detector() },
            baseline_net: UNetConfig::baseline(),
            baseline_train: UNetTrainConfig { epochs: 40, patches_per_epoch: 32, ..UNetTrainConfig::baseline() },
            shape_net: ShapeConfig::default(),
            shape_train: ShapeTrainConfig { epochs: 15, ..ShapeTrainConfig::default() },
            sweep: SweepConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::Missing(format!("config {}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
