//! Monte Carlo prediction and evaluation metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};

use super::{network_forward, Likelihood, Model, NoiseBundle, Targets};

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    /// `samples[s][i]` is the network output for row `i` under sample `s`;
    /// the predictive is the mixture of `N(samples[s][i], noise_var)`.
    Regression { samples: Vec<Vec<f64>>, noise_var: f64 },
    /// Row-major `N x C` Monte Carlo averaged class probabilities.
    Classification { probs: Vec<f64>, classes: usize },
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Regression { samples, .. } => samples.first().map_or(0, Vec::len),
            Predictions::Classification { probs, classes } => probs.len() / classes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Predictive means (regression only).
    pub fn mean(&self) -> Option<Vec<f64>> {
        let Predictions::Regression { samples, .. } = self else { return None };
        let s = samples.len() as f64;
        Some((0..self.len()).map(|i| samples.iter().map(|r| r[i]).sum::<f64>() / s).collect())
    }

    /// Predictive variances of the mixture (regression only).
    pub fn variance(&self) -> Option<Vec<f64>> {
        let Predictions::Regression { samples, noise_var } = self else { return None };
        let mean = self.mean()?;
        let s = samples.len() as f64;
        Some(
            mean.iter()
                .enumerate()
                .map(|(i, m)| noise_var + samples.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / s)
                .collect(),
        )
    }
}

/// Predictive distribution at the rows of `x` (`n x din`, row-major) from
/// `mc` posterior samples.
pub fn predict(model: &Model, x: &[f64], n: usize, mc: usize, seed: u64) -> Result<Predictions> {
    let cfg = &model.config;
    let din = cfg.in_dim();
    if x.len() != n * din {
        return Err(Error::Dimension(format!("{} values for {n} rows of width {din}", x.len())));
    }
    if mc == 0 {
        return Err(Error::Contract("need at least one Monte Carlo sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = cfg.out_dim();
    let mut samples = vec![Vec::with_capacity(n * out); mc];
    let mut start = 0;
    while start < n {
        let rows = CHUNK.min(n - start);
        let noise = NoiseBundle::draw(cfg, rows, mc, &mut rng);
        let outs = network_forward(cfg, &model.params, &x[start * din..(start + rows) * din], &noise)?;
        for (acc, o) in samples.iter_mut().zip(outs) {
            acc.extend(o);
        }
        start += rows;
    }
    match cfg.likelihood {
        Likelihood::Gaussian => Ok(Predictions::Regression {
            samples,
            noise_var: model.noise_var().ok_or_else(|| Error::Contract("missing noise variance".into()))?,
        }),
        Likelihood::Categorical => {
            let mut probs = vec![0.0; n * out];
            for s in &samples {
                for i in 0..n {
                    let row = &s[i * out..(i + 1) * out];
                    let lse = log_sum_exp(row);
                    for c in 0..out {
                        probs[i * out + c] += (row[c] - lse).exp() / mc as f64;
                    }
                }
            }
            Ok(Predictions::Classification { probs, classes: out })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    pub mnll: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
}

/// `Σ_b (|B_b| / N) |acc(B_b) - conf(B_b)|` over `bins` equal-width
/// confidence bins on `[0, 1]`.
pub fn expected_calibration_error(confidence: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidence.is_empty() || confidence.len() != correct.len() || bins == 0 {
        return Err(Error::Contract("calibration needs matching nonempty inputs".into()));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        // bins are (k/B, (k+1)/B], with 0 in the first
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += c;
        acc[b] += ok as u8 as f64;
    }
    let n = confidence.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (acc[b] / m - conf[b] / m).abs()
        })
        .sum())
}

/// RMSE and MNLL for regression; MNLL, error rate and ECE (15 bins) for
/// classification.
pub fn compute_metrics(pred: &Predictions, targets: &Targets) -> Result<Metrics> {
    if pred.is_empty() || pred.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            pred.len(),
            targets.len()
        )));
    }
    match (pred, targets) {
        (Predictions::Regression { samples, noise_var }, Targets::Real(y)) => {
            let mean = pred.mean().expect("regression");
            let n = y.len() as f64;
            let rmse = (mean.iter().zip(y).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / n).sqrt();
            let s = samples.len() as f64;
            let c = -0.5 * (2.0 * std::f64::consts::PI * noise_var).ln();
            let mut lp = vec![0.0; samples.len()];
            let mut total = 0.0;
            for (i, &t) in y.iter().enumerate() {
                for (k, smp) in samples.iter().enumerate() {
                    lp[k] = c - 0.5 * (t - smp[i]).powi(2) / noise_var;
                }
                total += log_sum_exp(&lp) - s.ln();
            }
            Ok(Metrics { rmse: Some(rmse), mnll: -total / n, error_rate: None, ece: None })
        }
        (Predictions::Classification { probs, classes }, Targets::Labels(y)) => {
            let c = *classes;
            let n = y.len();
            let mut nll = 0.0;
            let mut conf = Vec::with_capacity(n);
            let mut correct = Vec::with_capacity(n);
            for (i, &label) in y.iter().enumerate() {
                if label >= c {
                    return Err(Error::Contract(format!("label {label} out of {c} classes")));
                }
                let row = &probs[i * c..(i + 1) * c];
                nll -= row[label].max(f64::MIN_POSITIVE).ln();
                let (arg, &p) = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .expect("at least two classes");
                conf.push(p);
                correct.push(arg == label);
            }
            let errors = correct.iter().filter(|&&ok| !ok).count();
            Ok(Metrics {
                rmse: None,
                mnll: nll / n as f64,
                error_rate: Some(errors as f64 / n as f64),
                ece: Some(expected_calibration_error(&conf, &correct, 15)?),
            })
        }
        _ => Err(Error::Contract("predictions do not match the target kind".into())),
    }
}
