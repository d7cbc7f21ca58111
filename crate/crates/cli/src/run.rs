//! The work behind each command, callable without going through argument
//! parsing or the filesystem.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use whvi::bnn::{
    compute_metrics, elbo, predict, train, Data, Likelihood, LogRecord, Metrics, Model, NoiseBundle, Predictions, Targets,
};
use whvi::gp_rff::{GpRffModel, RffConfig};
use whvi::transform::fwht_batch_inplace;
use whvi::whvi::{approximate_matrix, standard_normal};

use crate::checkpoint::TargetScaling;
use crate::config::{ApproxStudyConfig, BenchConfig, GpRunConfig, RunConfig};
use crate::data::Dataset;
use crate::error::{CliError, Result};

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub steps: usize,
}

fn check_compatible(model_in: usize, out: usize, likelihood: Likelihood, ds: &Dataset) -> Result<()> {
    if model_in != ds.d {
        return Err(CliError::Usage(format!("network expects {model_in} inputs, data has {}", ds.d)));
    }
    match (likelihood, ds.classes) {
        (Likelihood::Gaussian, None) => Ok(()),
        (Likelihood::Categorical, Some(c)) if c <= out => Ok(()),
        (Likelihood::Categorical, Some(c)) => {
            Err(CliError::Usage(format!("data has {c} classes but the network has {out} outputs")))
        }
        _ => Err(CliError::Usage("likelihood does not match the data's task".into())),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Initializes and trains a network on the training split. Regression
/// networks start with their output bias at the training target mean.
pub fn train_network(
    cfg: &RunConfig,
    ds: &Dataset,
    seed: u64,
    steps: Option<usize>,
    sink: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    let net = &cfg.network;
    net.validate()?;
    check_compatible(net.in_dim(), net.out_dim(), net.likelihood, ds)?;
    let mut schedule = cfg.schedule;
    if let Some(s) = steps {
        schedule.total_steps = s;
    }
    schedule.fixed_noise_steps = schedule.fixed_noise_steps.min(schedule.total_steps);
    let train_data = ds.train()?;
    let mut model = Model::init(net.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    if let Targets::Real(y) = &train_data.y {
        model.set_output_bias(mean(y));
    }
    let log = if schedule.total_steps == 0 {
        Vec::new()
    } else {
        train(&mut model, &schedule, &train_data, None, seed, sink)?
    };
    Ok(TrainOutcome { model, log, steps: schedule.total_steps })
}

pub fn evaluate(model: &Model, data: &Data, mc: usize, seed: u64) -> Result<Metrics> {
    let pred = predict(model, &data.x, data.n, mc, seed)?;
    Ok(compute_metrics(&pred, &data.y)?)
}

/// Negative ELBO over the whole of `data`, averaged over `mc` Monte Carlo
/// samples. Much less noisy than the minibatch values in the training log.
pub fn full_neg_elbo(model: &Model, data: &Data, mc: usize, seed: u64) -> Result<f64> {
    if mc == 0 {
        return Err(CliError::Usage("need at least one Monte Carlo sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = NoiseBundle::draw(&model.config, data.n, mc, &mut rng);
    Ok(elbo(&model.config, &model.params, data, data.n, &noise)?.parts.neg_elbo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    #[serde(rename = "D")]
    pub d: usize,
    pub batch: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Wall time of the in-place batch transform at each size, one warm-up
/// run excluded.
pub fn bench_fwht(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.min_log2 > cfg.max_log2 || cfg.reps == 0 || cfg.batch == 0 {
        return Err(CliError::Usage("bench needs min_log2 <= max_log2 and positive batch and reps".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for k in cfg.min_log2..=cfg.max_log2 {
        let d = 1usize << k;
        let mut buf = standard_normal(cfg.batch * d, &mut rng);
        fwht_batch_inplace(&mut buf, d, true)?;
        let times: Vec<f64> = (0..cfg.reps)
            .map(|_| {
                let t = Instant::now();
                fwht_batch_inplace(&mut buf, d, true).map(|_| t.elapsed().as_secs_f64() * 1e3)
            })
            .collect::<whvi::Result<_>>()?;
        let m = mean(&times);
        let var = times.iter().map(|t| (t - m).powi(2)).sum::<f64>() / times.len() as f64;
        rows.push(BenchRow { d, batch: cfg.batch, mean_ms: m, std_ms: var.sqrt() });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxRow {
    #[serde(rename = "D")]
    pub d: usize,
    pub trial: usize,
    pub best_rmse: f64,
}

/// Fits the structured form to i.i.d. `Uniform(-1, 1)` targets. Each
/// `(D, trial)` pair has its own seed, so results do not depend on thread
/// scheduling.
pub fn approx_study(cfg: &ApproxStudyConfig) -> Result<Vec<ApproxRow>> {
    if cfg.dims.iter().any(|d| !d.is_power_of_two()) {
        return Err(CliError::Usage("approx-study dims must be powers of two".into()));
    }
    let jobs: Vec<(usize, usize)> = cfg.dims.iter().flat_map(|&d| (0..cfg.trials).map(move |t| (d, t))).collect();
    jobs.par_iter()
        .map(|&(d, trial)| {
            let seed = cfg.seed ^ ((d as u64) << 32) ^ trial as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gamma = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let res = approximate_matrix(&gamma, &cfg.options, &mut rng)?;
            Ok(ApproxRow { d, trial, best_rmse: res.best_rmse })
        })
        .collect()
}

/// Median of `best_rmse` per dimension, in `dims` order.
pub fn approx_medians(rows: &[ApproxRow], dims: &[usize]) -> Vec<(usize, f64)> {
    dims.iter()
        .map(|&d| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.d == d).map(|r| r.best_rmse).collect();
            v.sort_by(f64::total_cmp);
            let m = if v.is_empty() {
                f64::NAN
            } else if v.len() % 2 == 1 {
                v[v.len() / 2]
            } else {
                0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
            };
            (d, m)
        })
        .collect()
}

pub struct GpOutcome {
    pub model: GpRffModel,
    pub log: Vec<LogRecord>,
    pub target_scaling: TargetScaling,
    pub steps: usize,
}

/// Fits GP-RFF regression to `(x, y)` (inputs already scaled). Targets are
/// standardized internally; see [`gp_predict`] for predictions in the
/// original units.
pub fn gp_fit(cfg: &GpRunConfig, train_data: &Data, seed: u64, steps: Option<usize>) -> Result<GpOutcome> {
    let Targets::Real(y) = &train_data.y else {
        return Err(CliError::Usage("gp-train needs a regression dataset".into()));
    };
    let m = mean(y);
    let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    let ts = TargetScaling { mean: m, std: if sd > 0.0 { sd } else { 1.0 } };
    let ys: Vec<f64> = y.iter().map(|v| (v - ts.mean) / ts.std).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rff = RffConfig::sample(train_data.d, cfg.n_rf, &mut rng)?;
    let mut model = GpRffModel::init(rff, cfg.posterior, &mut rng)?;
    let mut tc = cfg.train.clone();
    if let Some(s) = steps {
        tc.fixed_noise_steps = tc.fixed_noise_steps * s / tc.steps.max(1);
        tc.steps = s;
    }
    let log = if tc.steps == 0 { Vec::new() } else { model.train(&tc, &train_data.x, &ys, seed)? };
    Ok(GpOutcome { model, log, target_scaling: ts, steps: tc.steps })
}

/// Monte Carlo predictive in the original target units.
pub fn gp_predict(model: &GpRffModel, ts: TargetScaling, data: &Data, mc: usize, seed: u64) -> Result<Predictions> {
    match model.predict(&data.x, data.n, mc, seed)? {
        Predictions::Regression { samples, noise_var } => Ok(Predictions::Regression {
            samples: samples.into_iter().map(|s| s.into_iter().map(|v| v * ts.std + ts.mean).collect()).collect(),
            noise_var: noise_var * ts.std * ts.std,
        }),
        other => Ok(other),
    }
}
