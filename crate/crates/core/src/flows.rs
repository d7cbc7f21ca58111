//! Planar normalizing flows over the WHVI `g` vector.
//!
//! `f(z) = z + u tanh(wᵀz + b)`, with `u` adjusted so that `uᵀw >= -1`,
//! which keeps every layer invertible.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::ParamSet;
use crate::whvi::{standard_normal, PriorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarFlowParams {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
}

impl PlanarFlowParams {
    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// Number of scalars, `2D + 1`.
    pub fn param_count(&self) -> usize {
        2 * self.dim() + 1
    }

    fn check(&self) -> Result<()> {
        if self.w.len() != self.u.len() {
            return dim_err(format!("u has length {}, w has {}", self.u.len(), self.w.len()));
        }
        Ok(())
    }

    /// Same flow with `u` replaced by its invertible adjustment.
    pub fn adjusted(&self) -> Result<Self> {
        Ok(Self { u: invertibility_adjust(&self.u, &self.w)?, w: self.w.clone(), b: self.b })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `u + [softplus(uᵀw) - 1 - uᵀw] w / ||w||²`.
pub fn invertibility_adjust(u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if u.len() != w.len() {
        return dim_err(format!("u has length {}, w has {}", u.len(), w.len()));
    }
    let ww = dot(w, w);
    if ww == 0.0 {
        return Err(Error::Contract("planar flow needs a nonzero w".into()));
    }
    let uw = dot(u, w);
    let m = softplus(uw) - 1.0 - uw;
    Ok(u.iter().zip(w).map(|(&ui, &wi)| ui + m * wi / ww).collect())
}

/// One flow step with `u` used as given. Returns `(f(z), log|det ∂f/∂z|)`.
pub fn flow_forward(params: &PlanarFlowParams, z: &[f64]) -> Result<(Vec<f64>, f64)> {
    params.check()?;
    if z.len() != params.dim() {
        return dim_err(format!("z has length {}, flow has {}", z.len(), params.dim()));
    }
    let t = (dot(&params.w, z) + params.b).tanh();
    let out = z.iter().zip(&params.u).map(|(zi, ui)| zi + ui * t).collect();
    let logdet = (1.0 + dot(&params.u, &params.w) * (1.0 - t * t)).abs().ln();
    Ok((out, logdet))
}

/// Base Gaussian `q0 = N(mu0, diag(sigma0²))` followed by `K` planar flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowChain {
    pub mu0: Vec<f64>,
    /// `sigma0 = softplus(sigma0_param)`.
    pub sigma0_param: Vec<f64>,
    /// Raw parameters; when `adjust` is set the invertibility adjustment is
    /// applied to `u` on every run.
    pub flows: Vec<PlanarFlowParams>,
    #[serde(default = "yes")]
    pub adjust: bool,
}

fn yes() -> bool {
    true
}

/// Every term of the flow-corrected single-sample KL estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTerms {
    pub z_k: Vec<f64>,
    pub log_q0: f64,
    pub sum_logdet: f64,
    pub log_p: f64,
}

impl FlowTerms {
    /// `log q0(z0) - Σ logdet - log p(zK)`, an unbiased estimate of
    /// `KL(q_K || p)`.
    pub fn kl_estimate(&self) -> f64 {
        self.log_q0 - self.sum_logdet - self.log_p
    }
}

impl FlowChain {
    /// `K` flows with small random `u`, `w ~ N(0, 1/D)` and `b = 0`.
    pub fn init<R: Rng + ?Sized>(mu0: Vec<f64>, sigma0_param: Vec<f64>, k: usize, rng: &mut R) -> Self {
        let d = mu0.len();
        let flows = (0..k)
            .map(|_| PlanarFlowParams {
                u: standard_normal(d, rng).into_iter().map(|x| 0.01 * x).collect(),
                w: standard_normal(d, rng).into_iter().map(|x| x / (d as f64).sqrt()).collect(),
                b: 0.0,
            })
            .collect();
        Self { mu0, sigma0_param, flows, adjust: true }
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim() + self.flows.iter().map(PlanarFlowParams::param_count).sum::<usize>()
    }

    pub fn write_params(&self, set: &mut ParamSet, prefix: &str) {
        for (k, f) in self.flows.iter().enumerate() {
            set.insert(format!("{prefix}.flow{k}.u"), f.u.clone());
            set.insert(format!("{prefix}.flow{k}.w"), f.w.clone());
            set.insert(format!("{prefix}.flow{k}.b"), vec![f.b]);
        }
    }

    /// Reads flow parameters written by [`FlowChain::write_params`]; the base
    /// is supplied by the caller.
    pub fn read_flows(set: &ParamSet, prefix: &str, k: usize, d: usize) -> Result<Vec<PlanarFlowParams>> {
        (0..k)
            .map(|i| {
                let get = |n: &str, len: usize| -> Result<Vec<f64>> {
                    let v = set.require(&format!("{prefix}.flow{i}.{n}"))?;
                    if v.len() != len {
                        return dim_err(format!("flow{i}.{n} has length {}, expected {len}", v.len()));
                    }
                    Ok(v.to_vec())
                };
                Ok(PlanarFlowParams { u: get("u", d)?, w: get("w", d)?, b: get("b", 1)?[0] })
            })
            .collect()
    }
}

/// Pushes `z0 = mu0 + sigma0 ⊙ noise` through the chain and collects the
/// terms of the flow-corrected objective under the prior `N(0, lambda I)`.
pub fn flow_elbo_terms(chain: &FlowChain, z0_noise: &[f64], prior: PriorConfig) -> Result<FlowTerms> {
    prior.check()?;
    let d = chain.dim();
    if z0_noise.len() != d || chain.sigma0_param.len() != d {
        return dim_err(format!("noise has length {}, chain has {d}", z0_noise.len()));
    }
    let mut log_q0 = -0.5 * d as f64 * (2.0 * PI).ln();
    let mut z = Vec::with_capacity(d);
    for ((&e, &sp), &m) in z0_noise.iter().zip(&chain.sigma0_param).zip(&chain.mu0) {
        let s = softplus(sp);
        log_q0 -= 0.5 * e * e + s.ln();
        z.push(m + s * e);
    }
    let mut sum_logdet = 0.0;
    for f in &chain.flows {
        let (next, ld) = if chain.adjust { flow_forward(&f.adjusted()?, &z)? } else { flow_forward(f, &z)? };
        z = next;
        sum_logdet += ld;
    }
    let log_p = -0.5 * dot(&z, &z) / prior.lambda - 0.5 * d as f64 * (2.0 * PI * prior.lambda).ln();
    Ok(FlowTerms { z_k: z, log_q0, sum_logdet, log_p })
}

/// Tape handles of one planar flow.
#[derive(Debug, Clone, Copy)]
pub struct FlowVars {
    pub u: Var,
    pub w: Var,
    pub b: Var,
}

fn adjust_graph(tape: &mut Tape, f: &FlowVars) -> Result<Var> {
    let uw = tape.mul(f.u, f.w)?;
    let uw = tape.sum(uw);
    let sp = tape.softplus(uw);
    let m = tape.sub(sp, uw)?;
    let m = tape.add_scalar(m, -1.0)?;
    let ww = tape.square(f.w);
    let ww = tape.sum(ww);
    let inv = tape.recip(ww);
    let coef = tape.mul(m, inv)?;
    let shift = tape.mul(f.w, coef)?;
    tape.add(f.u, shift)
}

/// Differentiable chain run. `noise` is one `[D]` draw; returns `(zK, KL
/// estimate)` with the KL estimate as in [`FlowTerms::kl_estimate`].
pub fn flow_graph(
    tape: &mut Tape,
    mu0: Var,
    sigma0_param: Var,
    flows: &[FlowVars],
    adjust: bool,
    noise: &[f64],
    prior: PriorConfig,
) -> Result<(Var, Var)> {
    prior.check()?;
    let d = noise.len();
    let eps = tape.constant(noise.to_vec(), &[d])?;
    let sigma = tape.softplus(sigma0_param);
    let scaled = tape.mul(eps, sigma)?;
    let mut z = tape.add(scaled, mu0)?;
    // log q0(z0) without the constant; the noise term is data.
    let log_sigma = tape.log(sigma);
    let sum_log_sigma = tape.sum(log_sigma);
    let mut kl = sum_log_sigma;
    let kl_const = -0.5 * noise.iter().map(|e| e * e).sum::<f64>() - 0.5 * d as f64 * (2.0 * PI).ln()
        + 0.5 * d as f64 * (2.0 * PI * prior.lambda).ln();
    kl = tape.scale(kl, -1.0);
    for f in flows {
        let u_hat = if adjust { adjust_graph(tape, f)? } else { f.u };

        let wz = tape.mul(f.w, z)?;
        let wz = tape.sum(wz);
        let a = tape.add(wz, f.b)?;
        let t = tape.tanh(a);
        let step = tape.mul(u_hat, t)?;
        z = tape.add(z, step)?;

        let t2 = tape.square(t);
        let dpsi = tape.scale(t2, -1.0);
        let dpsi = tape.add_scalar(dpsi, 1.0)?;
        let uhw = tape.mul(u_hat, f.w)?;
        let uhw = tape.sum(uhw);
        let det = tape.mul(uhw, dpsi)?;
        let det = tape.add_scalar(det, 1.0)?;
        let logdet = tape.log(det);
        kl = tape.sub(kl, logdet)?;
    }
    let z2 = tape.square(z);
    let z2 = tape.sum(z2);
    let neg_log_p = tape.scale(z2, 0.5 / prior.lambda);
    kl = tape.add(kl, neg_log_p)?;
    let kl = tape.add_scalar(kl, kl_const)?;
    Ok((z, kl))
}
