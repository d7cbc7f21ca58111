//! Gaussian process regression through random Fourier features, with a
//! variational posterior over the feature weights.
//!
//! `f = Phi w`, `w ~ N(0, I)` a priori. The WHVI variant models `w` as the
//! row-major flattening of a `D x D` structured matrix, truncated to `n_rf`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bnn::{meanfield_forward_graph, LogRecord, Predictions};
use crate::error::{Error, Result};
use crate::params::{Adam, LrSchedule, ParamSet};
use crate::whvi::{
    apply_structure, kl_graph, meanfield_kl_graph, reshape_vector_shape, sample_g_graph, standard_normal,
    Covariance, PriorConfig, StructureKind, StructureSpec, WhviPosterior, WhviShape, WhviVars,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RffConfig {
    /// Number of features; cos/sin pairs, so even.
    pub n_rf: usize,
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise_std: f64,
    /// `din x n_rf/2` standard normal projection, row-major.
    pub omega: Vec<f64>,
}

impl RffConfig {
    /// Draws `Omega` and sets the usual starting hyperparameters: every
    /// lengthscale `sqrt(din/2)`, unit kernel variance, noise std 0.02.
    pub fn sample<R: Rng + ?Sized>(din: usize, n_rf: usize, rng: &mut R) -> Result<Self> {
        let cfg = Self {
            n_rf,
            lengthscales: vec![(din as f64 / 2.0).sqrt(); din],
            signal_var: 1.0,
            noise_std: 0.02,
            omega: standard_normal(din * n_rf / 2, rng),
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn din(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.n_rf == 0 || !self.n_rf.is_multiple_of(2) {
            return Err(Error::Contract(format!("n_rf must be positive and even, got {}", self.n_rf)));
        }
        if self.lengthscales.is_empty() || self.lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Contract("lengthscales must be positive".into()));
        }
        if !(self.signal_var > 0.0) || !(self.noise_std > 0.0) {
            return Err(Error::Contract("kernel and noise variances must be positive".into()));
        }
        if self.omega.len() != self.din() * self.n_rf / 2 {
            return Err(Error::Dimension(format!(
                "omega has {} entries, expected {}",
                self.omega.len(),
                self.din() * self.n_rf / 2
            )));
        }
        Ok(())
    }
}

/// `Phi = sqrt(2 sigma² / n_rf) [cos(X̃ Omega), sin(X̃ Omega)]`,
/// `X̃ = X / lengthscales`; row-major `n x n_rf`.
pub fn rff_transform(rff: &RffConfig, x: &[f64], n: usize) -> Result<Vec<f64>> {
    rff.check()?;
    let din = rff.din();
    if x.len() != n * din {
        return Err(Error::Dimension(format!("{} values for {n} rows of width {din}", x.len())));
    }
    let half = rff.n_rf / 2;
    let scale = (2.0 * rff.signal_var / rff.n_rf as f64).sqrt();
    let mut phi = vec![0.0; n * rff.n_rf];
    for i in 0..n {
        let row = &mut phi[i * rff.n_rf..(i + 1) * rff.n_rf];
        for k in 0..half {
            let mut a = 0.0;
            for j in 0..din {
                a += x[i * din + j] / rff.lengthscales[j] * rff.omega[j * half + k];
            }
            row[k] = scale * a.cos();
            row[half + k] = scale * a.sin();
        }
    }
    Ok(phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightPosterior {
    /// Reshaped-vector WHVI over `w`.
    Whvi,
    /// Fully factorized Gaussian over `w`.
    Meanfield,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpTrainConfig {
    pub steps: usize,
    /// Constant Adam learning rate.
    pub lr: f64,
    /// Steps with the observation noise held at its initial value.
    pub fixed_noise_steps: usize,
    pub batch_size: usize,
    pub mc_train: usize,
    /// Learn lengthscales and kernel variance alongside the posterior.
    pub learn_kernel: bool,
    pub eval_interval: usize,
}

impl Default for GpTrainConfig {
    fn default() -> Self {
        Self {
            steps: 12_000,
            lr: 6e-4,
            fixed_noise_steps: 10_000,
            batch_size: 64,
            mc_train: 1,
            learn_kernel: true,
            eval_interval: 500,
        }
    }
}

const LOG_LS: &str = "log_lengthscales";
const LOG_SV: &str = "log_signal_var";
const LOG_NV: &str = "log_noise_var";
const W: &str = "w";

#[derive(Debug, Clone, PartialEq)]
pub struct GpRffModel {
    pub rff: RffConfig,
    pub posterior: WeightPosterior,
    /// Posterior arrays under `w.*` plus log kernel hyperparameters.
    pub params: ParamSet,
}

impl GpRffModel {
    /// WHVI prior variance: with orthonormal `H`, `Var(W_ij) = lambda / D`,
    /// so `lambda = D` matches the standard normal prior on `w`.
    pub fn whvi_shape(&self) -> WhviShape {
        reshape_vector_shape(self.rff.n_rf)
    }

    pub fn whvi_prior(&self) -> PriorConfig {
        PriorConfig { lambda: self.whvi_shape().d as f64 }
    }

    pub fn init<R: Rng + ?Sized>(rff: RffConfig, posterior: WeightPosterior, rng: &mut R) -> Result<Self> {
        rff.check()?;
        let mut params = ParamSet::new();
        params.insert(LOG_LS, rff.lengthscales.iter().map(|l| l.ln()).collect());
        params.insert(LOG_SV, vec![rff.signal_var.ln()]);
        params.insert(LOG_NV, vec![(rff.noise_std * rff.noise_std).ln()]);
        let mut model = Self { rff, posterior, params };
        match posterior {
            WeightPosterior::Whvi => {
                let post = WhviPosterior::init(
                    model.whvi_shape(),
                    StructureSpec::default(),
                    Covariance::Diagonal,
                    model.whvi_prior(),
                    rng,
                )?;
                post.write_params(&mut model.params, W);
            }
            WeightPosterior::Meanfield => {
                let n = model.rff.n_rf;
                model.params.insert(format!("{W}.mu"), standard_normal(n, rng));
                model.params.insert(format!("{W}.sigma_param"), vec![crate::autodiff::softplus_inv(1e-3); n]);
            }
        }
        Ok(model)
    }

    /// Variational parameter count of the weight posterior.
    pub fn weight_param_count(&self) -> usize {
        match self.posterior {
            WeightPosterior::Whvi => {
                crate::whvi::layer_param_count(self.whvi_shape(), StructureSpec::default())
            }
            WeightPosterior::Meanfield => 2 * self.rff.n_rf,
        }
    }

    pub fn noise_var(&self) -> f64 {
        self.params.get(LOG_NV).expect("always present")[0].exp()
    }

    pub fn whvi_posterior(&self) -> Result<WhviPosterior> {
        WhviPosterior::read_params(self.whvi_shape(), StructureSpec::default(), Covariance::Diagonal, &self.params, W)
    }

    /// Current kernel hyperparameters folded back into an [`RffConfig`].
    pub fn current_rff(&self) -> RffConfig {
        let mut r = self.rff.clone();
        r.lengthscales = self.params.get(LOG_LS).expect("present").iter().map(|v| v.exp()).collect();
        r.signal_var = self.params.get(LOG_SV).expect("present")[0].exp();
        r.noise_std = self.noise_var().sqrt();
        r
    }

    /// Dense samples of `w` (each of length `n_rf`) for the given noise.
    pub fn sample_weights(&self, noise: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = crate::bnn::register_params(&mut tape, &self.params, false)?;
        noise.iter().map(|e| {
            let w = self.weight_graph(&mut tape, &vars, e)?;
            Ok(tape.value(w).to_vec())
        }).collect()
    }

    /// One draw of `w` as an `[n_rf, 1]` tape value (WHVI posterior only).
    fn weight_graph(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, eps: &[f64]) -> Result<Var> {
        let n = self.rff.n_rf;
        match self.posterior {
            WeightPosterior::Whvi => {
                let shape = self.whvi_shape();
                let d = shape.d;
                let wv = WhviVars::lookup(StructureSpec::default(), Covariance::Diagonal, W, |k| vars.get(k).copied())?;
                let e = tape.constant(eps.to_vec(), &[d])?;
                let g = sample_g_graph(tape, &wv, shape, e)?;
                let eye = tape.constant(nalgebra::DMatrix::<f64>::identity(d, d).as_slice().to_vec(), &[d, d])?;
                // Feeding the identity to the transposed structure yields W
                // in row-major order.
                let wt = apply_structure(tape, StructureKind::S1hghs2, shape, eye, g, wv.s2, wv.s1)?;
                let flat = tape.reshape(wt, &[d * d])?;
                let w = if d * d > n { tape.slice(flat, 0, n)? } else { flat };
                tape.reshape(w, &[n, 1])
            }
            WeightPosterior::Meanfield => {
                let mu = vars.get(&format!("{W}.mu")).copied().ok_or_else(|| Error::Contract("missing w.mu".into()))?;
                let sp = vars.get(&format!("{W}.sigma_param")).copied().ok_or_else(|| Error::Contract("missing w.sigma_param".into()))?;
                let e = tape.constant(eps.to_vec(), &[n])?;
                let sd = tape.softplus(sp);
                let j = tape.mul(e, sd)?;
                let w = tape.add(j, mu)?;
                tape.reshape(w, &[n, 1])
            }
        }
    }

    /// Features on the tape, differentiable in the log hyperparameters.
    fn features_graph(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, x: &[f64], n: usize) -> Result<Var> {
        let din = self.rff.din();
        let half = self.rff.n_rf / 2;
        let xv = tape.constant(x.to_vec(), &[n, din])?;
        let need = |name: &str| {
            vars.get(name).copied().ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
        };
        let log_ls = need(LOG_LS)?;
        let neg = tape.scale(log_ls, -1.0);
        let inv_ls = tape.exp(neg);
        let xs = tape.mul(xv, inv_ls)?;
        let omega = tape.constant(self.rff.omega.clone(), &[din, half])?;
        let proj = tape.matmul(xs, omega, false)?;
        let c = tape.cos(proj);
        let s = tape.sin(proj);
        let phi = tape.concat(&[c, s])?;
        let half_log_sv = tape.scale(need(LOG_SV)?, 0.5);
        let amp = tape.exp(half_log_sv);
        let amp = tape.scale(amp, (2.0 / self.rff.n_rf as f64).sqrt());
        tape.mul(phi, amp)
    }

    /// Negative ELBO on a batch: `(N/B)(1/S) Σ_s Σ_i -log N(y_i | phi_i w_s,
    /// sigma_n²) + KL`.
    #[allow(clippy::type_complexity)]
    pub fn elbo_graph(
        &self,
        x: &[f64],
        y: &[f64],
        n_total: usize,
        noise: &[Vec<f64>],
        differentiable_kernel: bool,
    ) -> Result<(Tape, Var, BTreeMap<String, Var>, f64, f64)> {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, v) in self.params.iter() {
            let is_kernel = name == LOG_LS || name == LOG_SV;
            let var = if is_kernel && !differentiable_kernel {
                tape.constant(v.to_vec(), &[v.len()])?
            } else {
                tape.param_vec(v)
            };
            vars.insert(name.to_string(), var);
        }
        let (loss, nll, kl) = self.elbo_on_tape(&mut tape, &vars, x, y, n_total, noise)?;
        Ok((tape, loss, vars, nll, kl))
    }

    /// Records the negative ELBO on `tape` over the given parameter handles
    /// (named as in [`GpRffModel::params`]). Returns the loss and the values
    /// of its likelihood and KL parts.
    pub fn elbo_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        x: &[f64],
        y: &[f64],
        n_total: usize,
        noise: &[Vec<f64>],
    ) -> Result<(Var, f64, f64)> {
        let b = y.len();
        if b == 0 || noise.is_empty() {
            return Err(Error::Contract("empty batch or no samples".into()));
        }
        let var = |name: &str| {
            vars.get(name).copied().ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
        };
        let phi = self.features_graph(tape, vars, x, b)?;
        let lv = var(LOG_NV)?;
        let mut total: Option<Var> = None;
        for e in noise {
            let f = match self.posterior {
                WeightPosterior::Whvi => {
                    let w = self.weight_graph(tape, vars, e)?;
                    tape.matmul(phi, w, false)?
                }
                WeightPosterior::Meanfield => {
                    let n = self.rff.n_rf;
                    let mu = tape.reshape(var(&format!("{W}.mu"))?, &[n, 1])?;
                    let sp = tape.reshape(var(&format!("{W}.sigma_param"))?, &[n, 1])?;
                    let ev = tape.constant(e[..b].to_vec(), &[b, 1])?;
                    meanfield_forward_graph(tape, mu, sp, phi, ev)?
                }
            };
            let nll = tape.gaussian_nll(f, lv, y)?;
            total = Some(match total {
                Some(t) => tape.add(t, nll)?,
                None => nll,
            });
        }
        let nll = tape.scale(total.expect("nonempty"), n_total as f64 / (b * noise.len()) as f64);
        let kl = match self.posterior {
            WeightPosterior::Whvi => {
                let wv = WhviVars::lookup(StructureSpec::default(), Covariance::Diagonal, W, |k| vars.get(k).copied())?;
                kl_graph(tape, &wv, self.whvi_shape(), self.whvi_prior())?
            }
            WeightPosterior::Meanfield => {
                meanfield_kl_graph(tape, var(&format!("{W}.mu"))?, var(&format!("{W}.sigma_param"))?, 1.0)?
            }
        };
        let loss = tape.add(nll, kl)?;
        Ok((loss, tape.scalar(nll), tape.scalar(kl)))
    }

    fn noise_len(&self, batch: usize) -> usize {
        match self.posterior {
            WeightPosterior::Whvi => self.whvi_shape().d,
            WeightPosterior::Meanfield => batch,
        }
    }

    /// Adam on the negative ELBO; constant learning rate as in the GP
    /// protocol. Deterministic given `seed`.
    pub fn train(&mut self, cfg: &GpTrainConfig, x: &[f64], y: &[f64], seed: u64) -> Result<Vec<LogRecord>> {
        let n = y.len();
        if n == 0 || x.len() != n * self.rff.din() {
            return Err(Error::Dimension("training inputs do not match targets".into()));
        }
        if cfg.batch_size == 0 || cfg.mc_train == 0 || cfg.eval_interval == 0 {
            return Err(Error::Contract("batch_size, mc_train and eval_interval must be positive".into()));
        }
        let din = self.rff.din();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bs = cfg.batch_size.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let mut adam = Adam::new();
        let lr = LrSchedule::constant(cfg.lr);
        let start = Instant::now();
        let mut log = Vec::new();
        for step in 0..cfg.steps {
            if cursor + bs > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + bs];
            cursor += bs;
            let bx: Vec<f64> = idx.iter().flat_map(|&i| x[i * din..(i + 1) * din].iter().copied()).collect();
            let by: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let noise: Vec<Vec<f64>> = (0..cfg.mc_train).map(|_| standard_normal(self.noise_len(bs), &mut rng)).collect();
            let (tape, loss, vars, nll, kl) = self.elbo_graph(&bx, &by, n, &noise, cfg.learn_kernel)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("objective diverged at step {step}")));
            }
            if step % cfg.eval_interval == 0 || step + 1 == cfg.steps {
                log.push(LogRecord {
                    step,
                    lr: lr.at(step),
                    neg_elbo: value,
                    kl,
                    nll,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                    val: None,
                });
            }
            let grads = tape.backward(loss)?;
            let mut gs = ParamSet::new();
            for (name, &v) in &vars {
                let frozen = (name == LOG_NV && step < cfg.fixed_noise_steps)
                    || (!cfg.learn_kernel && (name == LOG_LS || name == LOG_SV));
                if !frozen {
                    gs.insert(name.clone(), grads.wrt(v, tape.value(v).len()));
                }
            }
            adam.step(std::slice::from_mut(&mut self.params), &[gs], lr.at(step))?;
        }
        Ok(log)
    }

    /// Monte Carlo predictive at `x` with `mc` weight samples.
    pub fn predict(&self, x: &[f64], n: usize, mc: usize, seed: u64) -> Result<Predictions> {
        if mc == 0 {
            return Err(Error::Contract("need at least one Monte Carlo sample".into()));
        }
        let phi = rff_transform(&self.current_rff(), x, n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nrf = self.rff.n_rf;
        let samples = match self.posterior {
            WeightPosterior::Whvi => {
                let noise: Vec<Vec<f64>> = (0..mc).map(|_| standard_normal(self.whvi_shape().d, &mut rng)).collect();
                self.sample_weights(&noise)?
                    .into_iter()
                    .map(|w| (0..n).map(|i| (0..nrf).map(|k| phi[i * nrf + k] * w[k]).sum()).collect())
                    .collect()
            }
            WeightPosterior::Meanfield => {
                let mu = self.params.require(&format!("{W}.mu"))?;
                let sp = self.params.require(&format!("{W}.sigma_param"))?;
                (0..mc)
                    .map(|_| {
                        let e = standard_normal(nrf, &mut rng);
                        let w: Vec<f64> = (0..nrf).map(|k| mu[k] + crate::autodiff::softplus(sp[k]) * e[k]).collect();
                        (0..n).map(|i| (0..nrf).map(|k| phi[i * nrf + k] * w[k]).sum()).collect()
                    })
                    .collect()
            }
        };
        Ok(Predictions::Regression { samples, noise_var: self.noise_var() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    #[test]
    fn zero_projection_features() {
        let mut rff = RffConfig::sample(2, 8, &mut rng()).unwrap();
        rff.omega.iter_mut().for_each(|w| *w = 0.0);
        let phi = rff_transform(&rff, &[0.3, -1.0, 2.0, 0.1], 2).unwrap();
        let c = (2.0 / 8.0f64).sqrt();
        for row in phi.chunks(8) {
            assert!(row[..4].iter().all(|&v| (v - c).abs() < 1e-15));
            assert!(row[4..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn starting_hyperparameters() {
        let rff = RffConfig::sample(6, 16, &mut rng()).unwrap();
        assert!(rff.lengthscales.iter().all(|&l| (l - 3f64.sqrt()).abs() < 1e-15));
        assert_eq!((rff.signal_var, rff.noise_std), (1.0, 0.02));
        assert!(RffConfig::sample(2, 7, &mut rng()).is_err());
    }

    #[test]
    fn reshaped_parameter_count() {
        let rff = RffConfig::sample(1, 4096, &mut rng()).unwrap();
        let m = GpRffModel::init(rff.clone(), WeightPosterior::Whvi, &mut rng()).unwrap();
        assert_eq!(m.whvi_shape().d, 64);
        assert_eq!(m.weight_param_count(), 256);
        let mf = GpRffModel::init(rff, WeightPosterior::Meanfield, &mut rng()).unwrap();
        assert_eq!(mf.weight_param_count(), 8192);
    }

    #[test]
    fn sampled_weights_are_row_major_whvi() {
        let rff = RffConfig::sample(1, 40, &mut rng()).unwrap();
        let m = GpRffModel::init(rff, WeightPosterior::Whvi, &mut rng()).unwrap();
        let post = m.whvi_posterior().unwrap();
        let e = standard_normal(8, &mut rng());
        let w = m.sample_weights(std::slice::from_ref(&e)).unwrap().remove(0);
        let g = post.sample_g(&e).unwrap();
        let dense = post.weight_block(0, &g).unwrap();
        assert_eq!(w.len(), 40);
        for (k, v) in w.iter().enumerate() {
            assert!((v - dense[(k / 8, k % 8)]).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_features_match_direct() {
        let rff = RffConfig::sample(3, 10, &mut rng()).unwrap();
        let m = GpRffModel::init(rff.clone(), WeightPosterior::Meanfield, &mut rng()).unwrap();
        let x = standard_normal(12, &mut rng());
        let mut tape = Tape::new();
        let vars = crate::bnn::register_params(&mut tape, &m.params, true).unwrap();
        let phi = m.features_graph(&mut tape, &vars, &x, 4).unwrap();
        let direct = rff_transform(&rff, &x, 4).unwrap();
        for (a, b) in tape.value(phi).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
