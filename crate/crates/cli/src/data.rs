//! CSV ingestion, train/test splitting and input scaling.
//!
//! Files have a header row and comma-separated decimal fields; the last
//! column is the target. Scaling statistics always come from the training
//! split only.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use whvi::bnn::{Data, Targets};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

/// How inputs are rescaled before they reach a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    /// Zero mean, unit variance per feature.
    #[default]
    Standardize,
    /// Min-max onto `[0, 1]` per feature.
    UnitCube,
}

fn default_test_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { seed: 0, test_fraction: default_test_fraction() }
    }
}

/// Per-feature affine map `(x - offset) / scale` fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureScaling {
    pub kind: Scaling,
    pub offsets: Vec<f64>,
    pub scales: Vec<f64>,
}

impl FeatureScaling {
    /// Fits on the rows `idx` of the row-major `x`. Constant features get
    /// scale 1 so they map to zero instead of NaN.
    pub fn fit(kind: Scaling, x: &[f64], d: usize, idx: &[usize]) -> Self {
        let mut offsets = vec![0.0; d];
        let mut scales = vec![1.0; d];
        if idx.is_empty() {
            return Self { kind, offsets, scales };
        }
        for j in 0..d {
            let col = idx.iter().map(|&i| x[i * d + j]);
            let (off, sc) = match kind {
                Scaling::Standardize => {
                    let n = idx.len() as f64;
                    let mean = col.clone().sum::<f64>() / n;
                    let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    (mean, var.sqrt())
                }
                Scaling::UnitCube => {
                    let lo = col.clone().fold(f64::INFINITY, f64::min);
                    let hi = col.fold(f64::NEG_INFINITY, f64::max);
                    (lo, hi - lo)
                }
            };
            offsets[j] = off;
            scales[j] = if sc > 0.0 && sc.is_finite() { sc } else { 1.0 };
        }
        Self { kind, offsets, scales }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.offsets.len();
        x.iter().enumerate().map(|(k, v)| (v - self.offsets[k % d]) / self.scales[k % d]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Raw inputs, `n x d` row-major.
    pub x: Vec<f64>,
    pub y: Targets,
    pub n: usize,
    pub d: usize,
    pub classes: Option<usize>,
    pub split: SplitConfig,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub scaling: FeatureScaling,
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> CliError {
    CliError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Reads a dataset with the default 90/10 split (seed 0) and standardized
/// inputs.
pub fn load_csv(path: &Path, task: Task) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, std::io::Error::new(io.kind(), io.to_string())),
            _ => parse_err(path, 1, e.to_string()),
        })?;
    let header = reader.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    let width = header.len();
    if width == 0 || (width == 1 && header[0].is_empty()) {
        return Err(parse_err(path, 1, "empty file or missing header"));
    }
    if width < 2 {
        return Err(parse_err(path, 1, "need at least one feature column and a target column"));
    }
    let d = width - 1;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(parse_err(path, line, format!("expected {width} fields, found {}", rec.len())));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, line, format!("column {}: `{field}` is not a number", j + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("column {}: non-finite value", j + 1)));
            }
            if j < d {
                x.push(v);
            } else {
                y.push((v, line));
            }
        }
    }
    if y.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    let (targets, classes) = match task {
        Task::Regression => (Targets::Real(y.into_iter().map(|(v, _)| v).collect()), None),
        Task::Classification => {
            let mut labels = Vec::with_capacity(y.len());
            for (v, line) in y {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(parse_err(path, line, format!("label {v} is not a non-negative integer")));
                }
                labels.push(v as usize);
            }
            let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
            (Targets::Labels(labels), Some(classes))
        }
    };
    Ok(Dataset::new(x, d, targets, classes, SplitConfig::default(), Scaling::Standardize))
}

impl Dataset {
    pub fn new(
        x: Vec<f64>,
        d: usize,
        y: Targets,
        classes: Option<usize>,
        split: SplitConfig,
        scaling: Scaling,
    ) -> Self {
        let n = y.len();
        let mut ds = Self {
            x,
            y,
            n,
            d,
            classes,
            split,
            train_idx: Vec::new(),
            test_idx: Vec::new(),
            scaling: FeatureScaling { kind: scaling, offsets: vec![0.0; d], scales: vec![1.0; d] },
        };
        ds.resplit(split, scaling);
        ds
    }

    /// Reshuffles into train/test and refits the input scaling on the
    /// training rows. At least one row stays in the training split.
    pub fn resplit(&mut self, split: SplitConfig, scaling: Scaling) {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed));
        let frac = split.test_fraction.clamp(0.0, 1.0);
        let n_test = ((self.n as f64 * frac).round() as usize).min(self.n.saturating_sub(1));
        self.test_idx = idx[..n_test].to_vec();
        self.train_idx = idx[n_test..].to_vec();
        self.split = split;
        self.scaling = FeatureScaling::fit(scaling, &self.x, self.d, &self.train_idx);
    }

    fn subset(&self, idx: &[usize], scaling: &FeatureScaling) -> Result<Data> {
        let raw: Vec<f64> = idx.iter().flat_map(|&i| self.x[i * self.d..(i + 1) * self.d].iter().copied()).collect();
        let y = match &self.y {
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i]).collect()),
            Targets::Labels(v) => Targets::Labels(idx.iter().map(|&i| v[i]).collect()),
        };
        Ok(Data::new(scaling.apply(&raw), self.d, y)?)
    }

    pub fn train(&self) -> Result<Data> {
        self.subset(&self.train_idx, &self.scaling)
    }

    pub fn test(&self) -> Result<Data> {
        self.subset(&self.test_idx, &self.scaling)
    }

    /// Rows selected by `part` under an externally supplied scaling, e.g.
    /// one stored in a checkpoint.
    pub fn part_with(&self, part: Part, scaling: &FeatureScaling) -> Result<Data> {
        if scaling.offsets.len() != self.d {
            return Err(CliError::Usage(format!(
                "checkpoint expects {} features, data has {}",
                scaling.offsets.len(),
                self.d
            )));
        }
        let all: Vec<usize>;
        let idx = match part {
            Part::Train => &self.train_idx,
            Part::Test => &self.test_idx,
            Part::All => {
                all = (0..self.n).collect();
                &all
            }
        };
        if idx.is_empty() {
            return Err(CliError::Usage("selected split is empty".into()));
        }
        self.subset(idx, scaling)
    }

    pub fn task(&self) -> Task {
        match self.y {
            Targets::Real(_) => Task::Regression,
            Targets::Labels(_) => Task::Classification,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Part {
    Train,
    Test,
    All,
}
