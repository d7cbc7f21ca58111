//! WHVI layer operations recorded on an autodiff tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

use super::{Covariance, PriorConfig, StructureKind, StructureSpec, WhviPosterior, WhviShape};

/// Tape handles for the arrays of a [`WhviPosterior`].
#[derive(Debug, Clone, Copy)]
pub struct WhviVars {
    pub mu: Var,
    pub sigma_param: Var,
    pub chol_offdiag: Option<Var>,
    pub s1: Option<Var>,
    pub s1_sigma_param: Option<Var>,
    pub s2: Option<Var>,
    pub s2_sigma_param: Option<Var>,
}

impl WhviVars {
    /// Registers every array of `post` as a differentiable leaf.
    pub fn leaves(tape: &mut Tape, post: &WhviPosterior) -> Self {
        let s = |tape: &mut Tape, s: &Option<super::SDiag>| match s {
            Some(s) => (
                Some(tape.param_vec(&s.mean)),
                s.sigma_param.as_ref().map(|p| tape.param_vec(p)),
            ),
            None => (None, None),
        };
        let mu = tape.param_vec(&post.mu);
        let sigma_param = tape.param_vec(&post.sigma_param);
        let chol_offdiag = post.chol_offdiag.as_ref().map(|c| tape.param_vec(c));
        let (s1, s1_sigma_param) = s(tape, &post.s1);
        let (s2, s2_sigma_param) = s(tape, &post.s2);
        Self { mu, sigma_param, chol_offdiag, s1, s1_sigma_param, s2, s2_sigma_param }
    }

    /// Resolves handles by parameter name (`prefix.mu`, `prefix.s1`, ...).
    pub fn lookup(
        structure: StructureSpec,
        covariance: Covariance,
        prefix: &str,
        find: impl Fn(&str) -> Option<Var>,
    ) -> Result<Self> {
        let need = |name: &str| {
            find(&super::key(prefix, name))
                .ok_or_else(|| Error::Contract(format!("no tape variable for `{prefix}.{name}`")))
        };
        let var = structure.s_treatment == super::STreatment::Variational;
        let opt = |present: bool, name: &str| present.then(|| need(name)).transpose();
        Ok(Self {
            mu: need(super::MU)?,
            sigma_param: need(super::SIGMA)?,
            chol_offdiag: opt(covariance == Covariance::Full, super::CHOL)?,
            s1: opt(structure.kind.has_s1(), super::S1)?,
            s1_sigma_param: opt(structure.kind.has_s1() && var, super::S1_SIGMA)?,
            s2: opt(structure.kind.has_s2(), super::S2)?,
            s2_sigma_param: opt(structure.kind.has_s2() && var, super::S2_SIGMA)?,
        })
    }
}

/// Strictly-lower-triangular mask, row-major.
fn strict_lower_mask(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..i {
            m[i * d + j] = 1.0;
        }
    }
    m
}

/// `g = mu + Sigma^{1/2} noise`. `noise` is `[B, stack·D]` (one draw per row)
/// or `[stack·D]` (one draw shared by all rows).
pub fn sample_g_graph(
    tape: &mut Tape,
    vars: &WhviVars,
    shape: WhviShape,
    noise: Var,
) -> Result<Var> {
    let sigma = tape.softplus(vars.sigma_param);
    let scaled = match vars.chol_offdiag {
        None => tape.mul(noise, sigma)?,
        Some(off) => {
            let d = shape.d;
            let nshape = tape.shape(noise).to_vec();
            let rows = if nshape.len() == 2 { nshape[0] } else { 1 };
            let noise2 = tape.reshape(noise, &[rows, shape.g_len()])?;
            let mask = tape.constant(strict_lower_mask(d), &[d, d])?;
            let eye = tape.constant(nalgebra::DMatrix::<f64>::identity(d, d).as_slice().to_vec(), &[d, d])?;
            let mut parts = Vec::with_capacity(shape.stack);
            for k in 0..shape.stack {
                let off_k = tape.slice(off, k * d * d, d * d)?;
                let off_k = tape.reshape(off_k, &[d, d])?;
                let lower = tape.mul(off_k, mask)?;
                let sig_k = tape.slice(sigma, k * d, d)?;
                let diag = tape.diag_scale(eye, sig_k)?;
                let root = tape.add(lower, diag)?;
                let eps_k = tape.slice(noise2, k * d, d)?;
                parts.push(tape.matmul(eps_k, root, true)?);
            }
            let joined = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
            tape.reshape(joined, &nshape)?
        }
    };
    tape.add(scaled, vars.mu)
}

/// `mean + softplus(sigma_param) ⊙ noise`, or just `mean` for a point
/// estimate or when no noise is supplied.
pub fn effective_s(
    tape: &mut Tape,
    mean: Var,
    sigma_param: Option<Var>,
    noise: Option<Var>,
) -> Result<Var> {
    match (sigma_param, noise) {
        (Some(p), Some(e)) => {
            let sd = tape.softplus(p);
            let jitter = tape.mul(e, sd)?;
            tape.add(jitter, mean)
        }
        _ => Ok(mean),
    }
}

/// Rows of `x` (`[B, D]`) through the stacked structured weights; `g` is
/// per-row (`[B, stack·D]`) or shared (`[stack·D]`). Returns `[B, stack·D]`.
pub fn apply_structure(
    tape: &mut Tape,
    kind: StructureKind,
    shape: WhviShape,
    x: Var,
    g: Var,
    s1: Option<Var>,
    s2: Option<Var>,
) -> Result<Var> {
    let d = shape.d;
    let need = |s: Option<Var>, name: &str| {
        s.ok_or_else(|| Error::Contract(format!("structure {kind:?} needs {name}")))
    };
    let mut h = if shape.stack > 1 { tape.concat(&vec![x; shape.stack])? } else { x };
    match kind {
        StructureKind::Gh | StructureKind::Shgh => h = tape.fwht(h, Some(d), true)?,
        StructureKind::S1hghs2h => {
            h = tape.fwht(h, Some(d), true)?;
            h = tape.mul(h, need(s2, "s2")?)?;
            h = tape.fwht(h, Some(d), true)?;
        }
        StructureKind::S1hghs2 => {
            h = tape.mul(h, need(s2, "s2")?)?;
            h = tape.fwht(h, Some(d), true)?;
        }
    }
    h = tape.mul(h, g)?;
    if kind != StructureKind::Gh {
        h = tape.fwht(h, Some(d), true)?;
        h = tape.mul(h, need(s1, "s1")?)?;
    }
    Ok(h)
}

/// Local reparameterization: row `i` of the output is
/// `W(mu) h_i + W(Sigma^{1/2} eps_i) h_i`, i.e. the structured product with
/// an independent `g` draw per row. `s_noise` supplies one draw per
/// variational `S` diagonal, shared over the batch.
pub fn forward_local_reparam(
    tape: &mut Tape,
    vars: &WhviVars,
    structure: StructureSpec,
    shape: WhviShape,
    x: Var,
    noise: Var,
    s_noise: (Option<Var>, Option<Var>),
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ns = tape.shape(noise).to_vec();
    if xs.len() != 2 || xs[1] != shape.d {
        return Err(Error::Dimension(format!("input {xs:?} is not [B, {}]", shape.d)));
    }
    if ns != [xs[0], shape.g_len()] {
        return Err(Error::Dimension(format!(
            "noise {ns:?} does not match batch {} x {}",
            xs[0],
            shape.g_len()
        )));
    }
    let g = sample_g_graph(tape, vars, shape, noise)?;
    let s1 = match vars.s1 {
        Some(m) => Some(effective_s(tape, m, vars.s1_sigma_param, s_noise.0)?),
        None => None,
    };
    let s2 = match vars.s2 {
        Some(m) => Some(effective_s(tape, m, vars.s2_sigma_param, s_noise.1)?),
        None => None,
    };
    apply_structure(tape, structure.kind, shape, x, g, s1, s2)
}

/// `Σ KL(N(m_i, softplus(p_i)²) || N(0, lambda))` on the tape.
pub fn meanfield_kl_graph(tape: &mut Tape, mean: Var, sigma_param: Var, lambda: f64) -> Result<Var> {
    let n = tape.value(mean).len() as f64;
    let sd = tape.softplus(sigma_param);
    let var = tape.square(sd);
    let m2 = tape.square(mean);
    let quad = tape.add(var, m2)?;
    let quad = tape.sum(quad);
    let quad = tape.scale(quad, 0.5 / lambda);
    let logsd = tape.log(sd);
    let logsd = tape.sum(logsd);
    let neg = tape.scale(logsd, -1.0);
    let kl = tape.add(quad, neg)?;
    tape.add_scalar(kl, 0.5 * n * (lambda.ln() - 1.0))
}

/// KL of the layer posterior to its prior on the tape, matching
/// [`super::kl_to_prior`].
pub fn kl_graph(
    tape: &mut Tape,
    vars: &WhviVars,
    shape: WhviShape,
    prior: PriorConfig,
) -> Result<Var> {
    prior.check()?;
    let lam = prior.lambda;
    let mut kl = meanfield_kl_graph(tape, vars.mu, vars.sigma_param, lam)?;
    if let Some(off) = vars.chol_offdiag {
        let d = shape.d;
        let mask: Vec<f64> = (0..shape.stack).flat_map(|_| strict_lower_mask(d)).collect();
        let mask = tape.constant(mask, &[shape.stack * d * d])?;
        let lower = tape.mul(off, mask)?;
        let sq = tape.square(lower);
        let tr = tape.sum(sq);
        let tr = tape.scale(tr, 0.5 / lam);
        kl = tape.add(kl, tr)?;
    }
    for (m, p) in [(vars.s1, vars.s1_sigma_param), (vars.s2, vars.s2_sigma_param)] {
        if let (Some(m), Some(p)) = (m, p) {
            let s_kl = meanfield_kl_graph(tape, m, p, 1.0)?;
            kl = tape.add(kl, s_kl)?;
        }
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn posterior(kind: StructureKind, treat: STreatment, cov: Covariance, din: usize, dout: usize) -> WhviPosterior {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = WhviPosterior::init(
            setup_dimensions(din, dout),
            StructureSpec { kind, s_treatment: treat },
            cov,
            PriorConfig { lambda: 0.7 },
            &mut rng,
        )
        .unwrap();
        p.sigma_param = standard_normal(p.sigma_param.len(), &mut rng);
        if let Some(c) = &mut p.chol_offdiag {
            *c = standard_normal(c.len(), &mut rng);
        }
        p
    }

    #[test]
    fn graph_kl_matches_closed_form() {
        for cov in [Covariance::Diagonal, Covariance::Full] {
            for treat in [STreatment::Optimized, STreatment::Variational] {
                let p = posterior(StructureKind::S1hghs2, treat, cov, 5, 9);
                let prior = PriorConfig { lambda: 0.7 };
                let mut tape = Tape::new();
                let vars = WhviVars::leaves(&mut tape, &p);
                let kl = kl_graph(&mut tape, &vars, p.shape, prior).unwrap();
                let want = kl_to_prior(&p, prior).unwrap();
                assert!((tape.scalar(kl) - want).abs() < 1e-9 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn shared_g_matches_dense_weights() {
        for kind in [StructureKind::Gh, StructureKind::Shgh, StructureKind::S1hghs2h, StructureKind::S1hghs2] {
            for cov in [Covariance::Diagonal, Covariance::Full] {
                let p = posterior(kind, STreatment::Optimized, cov, 4, 7);
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let eps = standard_normal(p.shape.g_len(), &mut rng);
                let x = standard_normal(3 * 4, &mut rng);
                let g = p.sample_g(&eps).unwrap();
                let mut tape = Tape::new();
                let vars = WhviVars::leaves(&mut tape, &p);
                let e = tape.constant(eps.clone(), &[eps.len()]).unwrap();
                let gv = sample_g_graph(&mut tape, &vars, p.shape, e).unwrap();
                for (a, b) in tape.value(gv).iter().zip(&g) {
                    assert!((a - b).abs() < 1e-12);
                }
                let xv = tape.constant(x.clone(), &[3, 4]).unwrap();
                let out = apply_structure(&mut tape, kind, p.shape, xv, gv, vars.s1, vars.s2).unwrap();
                let out = tape.value(out).to_vec();
                for k in 0..p.shape.stack {
                    let w = p.weight_block(k, &g[k * 4..(k + 1) * 4]).unwrap();
                    for r in 0..3 {
                        let h = nalgebra::DVector::from_column_slice(&x[r * 4..(r + 1) * 4]);
                        let y = &w * h;
                        for i in 0..4 {
                            assert!((out[r * 8 + k * 4 + i] - y[i]).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_noise_row_is_local_mean() {
        let p = posterior(StructureKind::S1hghs2, STreatment::Optimized, Covariance::Full, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = standard_normal(8, &mut rng);
        let eps = standard_normal(8, &mut rng);
        let (m, a) = p.local_moments(0, &h).unwrap();
        let mut tape = Tape::new();
        let vars = WhviVars::leaves(&mut tape, &p);
        let x = tape.constant([vec![0.0; 0], h.clone(), h.clone()].concat(), &[2, 8]).unwrap();
        let noise = tape.constant([vec![0.0; 8], eps.clone()].concat(), &[2, 8]).unwrap();
        let out = forward_local_reparam(&mut tape, &vars, p.structure, p.shape, x, noise, (None, None)).unwrap();
        let out = tape.value(out);
        let lin = &m + &a * nalgebra::DVector::from_column_slice(&eps);
        for i in 0..8 {
            assert!((out[i] - m[i]).abs() < 1e-12);
            assert!((out[8 + i] - lin[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_noise_shape_checked() {
        let p = posterior(StructureKind::S1hghs2, STreatment::Optimized, Covariance::Diagonal, 4, 4);
        let mut tape = Tape::new();
        let vars = WhviVars::leaves(&mut tape, &p);
        let x = tape.constant(vec![0.0; 8], &[2, 4]).unwrap();
        let noise = tape.constant(vec![0.0; 4], &[1, 4]).unwrap();
        let r = forward_local_reparam(&mut tape, &vars, p.structure, p.shape, x, noise, (None, None));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }
}
