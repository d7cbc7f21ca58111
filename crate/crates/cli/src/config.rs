//! JSON run configurations. Keys mirror the struct fields and unknown keys
//! are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use whvi::bnn::{NetworkConfig, TrainSchedule};
use whvi::gp_rff::{GpTrainConfig, WeightPosterior};
use whvi::whvi::ApproxOptions;

use crate::data::SplitConfig;
use crate::error::{CliError, Result};

/// `train`: a network, its schedule and the data split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub split: SplitConfig,
    /// Seed for initialization, minibatches and Monte Carlo noise.
    #[serde(default)]
    pub seed: u64,
}

fn default_gp_posterior() -> WeightPosterior {
    WeightPosterior::Whvi
}

fn sixty_four() -> usize {
    64
}

/// `gp-train`: random-feature GP regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpRunConfig {
    pub n_rf: usize,
    #[serde(default = "default_gp_posterior")]
    pub posterior: WeightPosterior,
    #[serde(default)]
    pub train: GpTrainConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "sixty_four")]
    pub mc_test: usize,
}

/// `bench-fwht`: batch transform timings over `D = 2^min_log2 ..= 2^max_log2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub min_log2: u32,
    pub max_log2: u32,
    pub batch: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { min_log2: 10, max_log2: 16, batch: 512, reps: 10, seed: 0 }
    }
}

/// `approx-study`: best structured fits to random uniform matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproxStudyConfig {
    pub dims: Vec<usize>,
    pub trials: usize,
    pub options: ApproxOptions,
    pub seed: u64,
}

impl Default for ApproxStudyConfig {
    fn default() -> Self {
        Self { dims: vec![8, 16, 32, 64], trials: 20, options: ApproxOptions::default(), seed: 0 }
    }
}

/// Reads and parses a JSON file. A missing file or malformed content is a
/// usage error.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
