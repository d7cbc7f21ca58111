//! Monte Carlo forward passes and the negative ELBO.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flows::{flow_graph, FlowVars};
use crate::params::ParamSet;
use crate::whvi::{
    apply_structure, effective_s, forward_local_reparam, kl_graph, meanfield_kl_graph, standard_normal,
    STreatment, WhviVars,
};

use super::{prefix, Activation, Data, LayerKind, LayerSpec, Likelihood, NetworkConfig, Targets, LOG_NOISE_VAR};

/// Standard normal draws consumed by one stochastic layer in one Monte Carlo
/// sample.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerNoise {
    None,
    /// Per-row `g` noise, `[B, stack·D]` row-major.
    Local { eps: Vec<f64>, s1: Option<Vec<f64>>, s2: Option<Vec<f64>> },
    /// Base noise of a flow posterior, shared by the batch.
    Flow { z0: Vec<f64>, s1: Option<Vec<f64>>, s2: Option<Vec<f64>> },
    /// Per-row output noise, `[B, out]`.
    Meanfield { eps: Vec<f64> },
}

/// Noise for `samples.len()` Monte Carlo samples over a batch of `batch` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub batch: usize,
    pub samples: Vec<Vec<LayerNoise>>,
}

fn layer_noise(l: &LayerSpec, batch: usize, draw: &mut dyn FnMut(usize) -> Vec<f64>) -> LayerNoise {
    let s_noise = |present: bool, draw: &mut dyn FnMut(usize) -> Vec<f64>| {
        (present && l.structure.s_treatment == STreatment::Variational).then(|| draw(l.whvi_shape().g_len()))
    };
    match l.kind {
        LayerKind::Whvi => {
            let eps = draw(batch * l.whvi_shape().g_len());
            let s1 = s_noise(l.structure.kind.has_s1(), draw);
            let s2 = s_noise(l.structure.kind.has_s2(), draw);
            LayerNoise::Local { eps, s1, s2 }
        }
        LayerKind::WhviFlow => {
            let z0 = draw(l.whvi_shape().g_len());
            let s1 = s_noise(l.structure.kind.has_s1(), draw);
            let s2 = s_noise(l.structure.kind.has_s2(), draw);
            LayerNoise::Flow { z0, s1, s2 }
        }
        LayerKind::Meanfield => LayerNoise::Meanfield { eps: draw(batch * l.out_dim) },
        LayerKind::Deterministic => LayerNoise::None,
    }
}

impl NoiseBundle {
    pub fn draw<R: Rng + ?Sized>(config: &NetworkConfig, batch: usize, mc: usize, rng: &mut R) -> Self {
        let mut draw = |n: usize| standard_normal(n, rng);
        let samples = (0..mc)
            .map(|_| config.layers.iter().map(|l| layer_noise(l, batch, &mut draw)).collect())
            .collect();
        Self { batch, samples }
    }

    /// All-zero noise: every layer returns its posterior-mean output.
    pub fn zeros(config: &NetworkConfig, batch: usize, mc: usize) -> Self {
        let mut draw = |n: usize| vec![0.0; n];
        let samples = (0..mc)
            .map(|_| config.layers.iter().map(|l| layer_noise(l, batch, &mut draw)).collect())
            .collect();
        Self { batch, samples }
    }

    pub fn mc(&self) -> usize {
        self.samples.len()
    }
}

/// Registers every array of `params` as a rank-1 leaf.
pub fn register_params(tape: &mut Tape, params: &ParamSet, differentiable: bool) -> Result<BTreeMap<String, Var>> {
    params
        .iter()
        .map(|(name, v)| {
            let var = if differentiable { tape.param_vec(v) } else { tape.constant(v.to_vec(), &[v.len()])? };
            Ok((name.to_string(), var))
        })
        .collect()
}

fn lookup(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name).copied().ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
}

fn activate(tape: &mut Tape, h: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => tape.relu(h),
        Activation::Cos => tape.cos(h),
        Activation::Tanh => tape.tanh(h),
        Activation::Identity => h,
    }
}

fn opt_const(tape: &mut Tape, v: &Option<Vec<f64>>) -> Result<Option<Var>> {
    v.as_ref().map(|v| tape.constant(v.clone(), &[v.len()])).transpose()
}

/// Mean-field layer with local reparameterization: output mean `x W_mu`,
/// variance `x² W_sigma²`, plus `eps` scaled by the standard deviation.
/// `w_mu` and `w_sigma_param` are `[din, dout]`.
pub fn meanfield_forward_graph(tape: &mut Tape, w_mu: Var, w_sigma_param: Var, x: Var, eps: Var) -> Result<Var> {
    let mean = tape.matmul(x, w_mu, false)?;
    let sd = tape.softplus(w_sigma_param);
    let var_w = tape.square(sd);
    let x2 = tape.square(x);
    let var = tape.matmul(x2, var_w, false)?;
    let sd_out = tape.sqrt(var);
    let jitter = tape.mul(sd_out, eps)?;
    tape.add(mean, jitter)
}

/// Runs every Monte Carlo sample through the network. Returns one `[B, out]`
/// output per sample and, when flow layers are present, the mean over
/// samples of their single-sample KL estimates.
pub fn network_forward_graph(
    tape: &mut Tape,
    config: &NetworkConfig,
    vars: &BTreeMap<String, Var>,
    x: Var,
    noise: &NoiseBundle,
) -> Result<(Vec<Var>, Option<Var>)> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 || xs[1] != config.in_dim() || xs[0] != noise.batch {
        return Err(Error::Dimension(format!(
            "input {xs:?} does not match [{}, {}]",
            noise.batch,
            config.in_dim()
        )));
    }
    let b = xs[0];
    let mut outputs = Vec::with_capacity(noise.mc());
    let mut flow_kl: Option<Var> = None;
    for sample in &noise.samples {
        if sample.len() != config.layers.len() {
            return Err(Error::Dimension("noise bundle does not match the layer count".into()));
        }
        let mut h = x;
        for (i, (l, ln)) in config.layers.iter().zip(sample).enumerate() {
            let p = prefix(i);
            let pre = match (l.kind, ln) {
                (LayerKind::Whvi, LayerNoise::Local { eps, s1, s2 }) => {
                    let shape = l.whvi_shape();
                    let wv = WhviVars::lookup(l.structure, l.covariance, &p, |n| vars.get(n).copied())?;
                    let xp = tape.pad(h, shape.d)?;
                    let e = tape.constant(eps.clone(), &[b, shape.g_len()])?;
                    let sn = (opt_const(tape, s1)?, opt_const(tape, s2)?);
                    let out = forward_local_reparam(tape, &wv, l.structure, shape, xp, e, sn)?;
                    if shape.g_len() > l.out_dim {
                        tape.slice(out, 0, l.out_dim)?
                    } else {
                        out
                    }
                }
                (LayerKind::WhviFlow, LayerNoise::Flow { z0, s1, s2 }) => {
                    let shape = l.whvi_shape();
                    let wv = WhviVars::lookup(l.structure, l.covariance, &p, |n| vars.get(n).copied())?;
                    let flows = (0..l.n_flows)
                        .map(|k| {
                            Ok(FlowVars {
                                u: lookup(vars, &format!("{p}.flow{k}.u"))?,
                                w: lookup(vars, &format!("{p}.flow{k}.w"))?,
                                b: lookup(vars, &format!("{p}.flow{k}.b"))?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let (g, kl) = flow_graph(tape, wv.mu, wv.sigma_param, &flows, true, z0, config.prior())?;
                    flow_kl = Some(match flow_kl {
                        Some(acc) => tape.add(acc, kl)?,
                        None => kl,
                    });
                    let s1v = match wv.s1 {
                        Some(m) => {
                            let n = opt_const(tape, s1)?;
                            Some(effective_s(tape, m, wv.s1_sigma_param, n)?)
                        }
                        None => None,
                    };
                    let s2v = match wv.s2 {
                        Some(m) => {
                            let n = opt_const(tape, s2)?;
                            Some(effective_s(tape, m, wv.s2_sigma_param, n)?)
                        }
                        None => None,
                    };
                    let xp = tape.pad(h, shape.d)?;
                    let out = apply_structure(tape, l.structure.kind, shape, xp, g, s1v, s2v)?;
                    if shape.g_len() > l.out_dim {
                        tape.slice(out, 0, l.out_dim)?
                    } else {
                        out
                    }
                }
                (LayerKind::Meanfield, LayerNoise::Meanfield { eps }) => {
                    let wm = lookup(vars, &format!("{p}.w_mu"))?;
                    let ws = lookup(vars, &format!("{p}.w_sigma_param"))?;
                    let wm = tape.reshape(wm, &[l.in_dim, l.out_dim])?;
                    let ws = tape.reshape(ws, &[l.in_dim, l.out_dim])?;
                    let e = tape.constant(eps.clone(), &[b, l.out_dim])?;
                    meanfield_forward_graph(tape, wm, ws, h, e)?
                }
                (LayerKind::Deterministic, LayerNoise::None) => {
                    let w = lookup(vars, &format!("{p}.w"))?;
                    let w = tape.reshape(w, &[l.in_dim, l.out_dim])?;
                    tape.matmul(h, w, false)?
                }
                _ => return Err(Error::Contract(format!("noise for layer {i} does not match its kind"))),
            };
            let bias = lookup(vars, &format!("{p}.bias"))?;
            let z = tape.add(pre, bias)?;
            h = activate(tape, z, l.activation);
        }
        outputs.push(h);
    }
    let flow_kl = flow_kl.map(|v| tape.scale(v, 1.0 / noise.mc() as f64));
    Ok((outputs, flow_kl))
}

/// Output values `(S, B·out)` for the given noise, without gradients.
pub fn network_forward(
    config: &NetworkConfig,
    params: &ParamSet,
    x: &[f64],
    noise: &NoiseBundle,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, false)?;
    let xv = tape.constant(x.to_vec(), &[noise.batch, config.in_dim()])?;
    let (outs, _) = network_forward_graph(&mut tape, config, &vars, xv, noise)?;
    Ok(outs.into_iter().map(|o| tape.value(o).to_vec()).collect())
}

/// Values of the objective and its two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    pub neg_elbo: f64,
    /// `kl_scale`-free KL (or its flow estimate).
    pub kl: f64,
    /// `-(N/B) (1/S) Σ_s Σ_batch log p(y | x, W_s)`.
    pub nll: f64,
}

/// A recorded negative-ELBO graph ready for differentiation.
pub struct ElboGraph {
    pub tape: Tape,
    pub loss: Var,
    pub vars: BTreeMap<String, Var>,
    pub parts: ElboParts,
}

impl ElboGraph {
    /// Gradient of the loss for every parameter array.
    pub fn gradients(&self) -> Result<ParamSet> {
        let grads = self.tape.backward(self.loss)?;
        let mut out = ParamSet::new();
        for (name, &v) in &self.vars {
            out.insert(name.clone(), grads.wrt(v, self.tape.value(v).len()));
        }
        Ok(out)
    }
}

/// `-ELBO = -(N/B) Σ_batch (1/S) Σ_s log p(y | x, W_s) + kl_scale · KL`.
pub fn elbo(
    config: &NetworkConfig,
    params: &ParamSet,
    batch: &Data,
    n_total: usize,
    noise: &NoiseBundle,
) -> Result<ElboGraph> {
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params, true)?;
    let (loss, parts) = elbo_graph(&mut tape, config, &vars, batch, n_total, noise)?;
    Ok(ElboGraph { tape, loss, vars, parts })
}

/// Records the negative ELBO on `tape` over the given parameter handles.
/// Returns the loss and the values of its parts.
pub fn elbo_graph(
    tape: &mut Tape,
    config: &NetworkConfig,
    vars: &BTreeMap<String, Var>,
    batch: &Data,
    n_total: usize,
    noise: &NoiseBundle,
) -> Result<(Var, ElboParts)> {
    config.validate()?;
    if batch.n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let x = tape.constant(batch.x.clone(), &[batch.n, batch.d])?;
    let (outs, flow_kl) = network_forward_graph(tape, config, vars, x, noise)?;
    for &o in &outs {
        if let Some(i) = tape.value(o).iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite network output for batch row {}",
                i / config.out_dim()
            )));
        }
    }
    let mut total: Option<Var> = None;
    for &o in &outs {
        let nll = match (&config.likelihood, &batch.y) {
            (Likelihood::Gaussian, Targets::Real(y)) => {
                let lv = lookup(vars, LOG_NOISE_VAR)?;
                tape.gaussian_nll(o, lv, y)?
            }
            (Likelihood::Categorical, Targets::Labels(y)) => tape.softmax_cross_entropy(o, y)?,
            _ => return Err(Error::Contract("targets do not match the likelihood".into())),
        };
        total = Some(match total {
            Some(t) => tape.add(t, nll)?,
            None => nll,
        });
    }
    let total = total.expect("at least one sample");
    let nll = tape.scale(total, n_total as f64 / (batch.n as f64 * noise.mc() as f64));
    if !tape.scalar(nll).is_finite() {
        let y = match &batch.y {
            Targets::Real(y) => y.iter().position(|v| !v.is_finite()).unwrap_or(0),
            Targets::Labels(_) => 0,
        };
        return Err(Error::Numeric(format!("non-finite likelihood at batch row {y}")));
    }

    let mut kl: Option<Var> = flow_kl;
    for (i, l) in config.layers.iter().enumerate() {
        let p = prefix(i);
        let term = match l.kind {
            LayerKind::Whvi => {
                let wv = WhviVars::lookup(l.structure, l.covariance, &p, |n| vars.get(n).copied())?;
                Some(kl_graph(tape, &wv, l.whvi_shape(), config.prior())?)
            }
            LayerKind::WhviFlow => {
                let wv = WhviVars::lookup(l.structure, l.covariance, &p, |n| vars.get(n).copied())?;
                let mut acc: Option<Var> = None;
                for (m, sp) in [(wv.s1, wv.s1_sigma_param), (wv.s2, wv.s2_sigma_param)] {
                    if let (Some(m), Some(sp)) = (m, sp) {
                        let t = meanfield_kl_graph(tape, m, sp, 1.0)?;
                        acc = Some(match acc {
                            Some(a) => tape.add(a, t)?,
                            None => t,
                        });
                    }
                }
                acc
            }
            LayerKind::Meanfield => {
                let wm = lookup(vars, &format!("{p}.w_mu"))?;
                let ws = lookup(vars, &format!("{p}.w_sigma_param"))?;
                Some(meanfield_kl_graph(tape, wm, ws, config.meanfield_prior_var(l))?)
            }
            LayerKind::Deterministic => None,
        };
        if let Some(t) = term {
            kl = Some(match kl {
                Some(a) => tape.add(a, t)?,
                None => t,
            });
        }
    }
    let kl = match kl {
        Some(k) => k,
        None => tape.constant_scalar(0.0),
    };
    let scaled_kl = tape.scale(kl, config.kl_scale);
    let loss = tape.add(nll, scaled_kl)?;
    let parts = ElboParts { neg_elbo: tape.scalar(loss), kl: tape.scalar(kl), nll: tape.scalar(nll) };
    Ok((loss, parts))
}

#[cfg(test)]
mod tests {
    use super::super::{Model, Targets};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, d: usize, seed: u64) -> Data {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal(n * d, &mut rng);
        let y = standard_normal(n, &mut rng);
        Data::new(x, d, Targets::Real(y)).unwrap()
    }

    #[test]
    fn identical_noise_gives_identical_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = NetworkConfig::regression(3, 8, 2, Activation::Tanh);
        let m = Model::init(cfg.clone(), &mut rng).unwrap();
        let data = toy(5, 3, 2);
        let one = NoiseBundle::draw(&cfg, 5, 1, &mut rng);
        let two = NoiseBundle { batch: 5, samples: vec![one.samples[0].clone(), one.samples[0].clone()] };
        let out = network_forward(&cfg, &m.params, &data.x, &two).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn deterministic_net_without_kl_is_scaled_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = NetworkConfig::regression(2, 4, 1, Activation::Relu);
        for l in &mut cfg.layers {
            l.kind = LayerKind::Deterministic;
        }
        cfg.kl_scale = 0.0;
        let m = Model::init(cfg.clone(), &mut rng).unwrap();
        let data = toy(6, 2, 3);
        let noise = NoiseBundle::zeros(&cfg, 6, 1);
        let g = elbo(&cfg, &m.params, &data, 60, &noise).unwrap();
        let out = network_forward(&cfg, &m.params, &data.x, &noise).unwrap();
        let lv = m.params.get(LOG_NOISE_VAR).unwrap()[0];
        let Targets::Real(y) = &data.y else { unreachable!() };
        let nll: f64 = out[0]
            .iter()
            .zip(y)
            .map(|(f, t)| 0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (t - f).powi(2) / lv.exp()))
            .sum();
        assert!((g.parts.neg_elbo - 10.0 * nll).abs() < 1e-9 * nll.abs());
        assert_eq!(g.parts.kl, 0.0);
    }

    #[test]
    fn wrong_targets_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = NetworkConfig::regression(2, 4, 1, Activation::Relu);
        let m = Model::init(cfg.clone(), &mut rng).unwrap();
        let data = Data::new(vec![0.0; 4], 2, Targets::Labels(vec![0, 1])).unwrap();
        let noise = NoiseBundle::zeros(&cfg, 2, 1);
        assert!(elbo(&cfg, &m.params, &data, 2, &noise).is_err());
    }

    #[test]
    fn non_finite_input_reports_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = NetworkConfig::regression(2, 4, 1, Activation::Relu);
        let m = Model::init(cfg.clone(), &mut rng).unwrap();
        let mut data = toy(3, 2, 1);
        data.x[4] = f64::NAN;
        let noise = NoiseBundle::zeros(&cfg, 3, 1);
        match elbo(&cfg, &m.params, &data, 3, &noise) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("row 2"), "{msg}"),
            other => panic!("{:?}", other.map(|g| g.parts)),
        }
    }
}
