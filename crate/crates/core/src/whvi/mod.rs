//! Walsh-Hadamard structured weight posteriors.
//!
//! A block is `W = S1 H diag(g) H S2` with orthonormal `H` and
//! `g ~ N(mu, Sigma)`. Non-square layers stack independent `D x D` blocks
//! by rows. Vectorization is column-wise throughout.

mod approx;
mod graph;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, softplus_inv};
use crate::error::{dim_err, Error, Result};
use crate::params::ParamSet;
use crate::transform::fwht_inplace;

pub use approx::{approximate_matrix, ApproxOptions, ApproxResult};
pub use graph::{
    apply_structure, effective_s, forward_local_reparam, kl_graph, meanfield_kl_graph, sample_g_graph,
    WhviVars,
};

/// Largest block size for which the dense `D² x D` helpers will run.
pub const DENSE_LIMIT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhviShape {
    pub din_orig: usize,
    pub dout_orig: usize,
    /// Block size, a power of two.
    pub d: usize,
    /// Zero columns appended to inputs.
    pub padding: usize,
    /// Number of `D x D` blocks stacked by rows.
    pub stack: usize,
}

impl WhviShape {
    pub fn dout_padded(&self) -> usize {
        self.d * self.stack
    }

    /// Length of the stacked `g` vector.
    pub fn g_len(&self) -> usize {
        self.d * self.stack
    }
}

/// Block size and stacking for a `din -> dout` layer.
pub fn setup_dimensions(din: usize, dout: usize) -> WhviShape {
    let d = din.max(1).next_power_of_two();
    let stack = dout.max(1).div_ceil(d);
    WhviShape { din_orig: din, dout_orig: dout, d, padding: d - din.max(1), stack }
}

/// Smallest power-of-two `D` with `D² >= n_total`, for modeling a flat vector
/// as a row-major flattened `D x D` matrix.
pub fn reshape_vector_shape(n_total: usize) -> WhviShape {
    let mut d = 1usize;
    while d * d < n_total {
        d <<= 1;
    }
    WhviShape { din_orig: d, dout_orig: d, d, padding: 0, stack: 1 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructureKind {
    /// `diag(g) H`
    #[serde(rename = "GH")]
    Gh,
    /// `S H diag(g) H`
    #[serde(rename = "SHGH")]
    Shgh,
    /// `S1 H diag(g) H S2 H`
    #[serde(rename = "S1HGHS2H")]
    S1hghs2h,
    /// `S1 H diag(g) H S2`
    #[serde(rename = "S1HGHS2")]
    S1hghs2,
}

impl StructureKind {
    pub fn has_s1(self) -> bool {
        !matches!(self, StructureKind::Gh)
    }

    pub fn has_s2(self) -> bool {
        matches!(self, StructureKind::S1hghs2h | StructureKind::S1hghs2)
    }

    fn n_s(self) -> usize {
        self.has_s1() as usize + self.has_s2() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum STreatment {
    Optimized,
    Variational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    pub kind: StructureKind,
    pub s_treatment: STreatment,
}

impl Default for StructureSpec {
    fn default() -> Self {
        Self { kind: StructureKind::S1hghs2, s_treatment: STreatment::Optimized }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Variance of each `g_i`.
    pub lambda: f64,
}

impl PriorConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let p = Self { lambda };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Contract(format!("prior variance must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariance {
    #[default]
    Diagonal,
    /// Lower-triangular root per block.
    Full,
}

/// Diagonal `S` factor: a point estimate, or a mean-field Gaussian with a
/// standard normal prior.
#[derive(Debug, Clone, PartialEq)]
pub struct SDiag {
    pub mean: Vec<f64>,
    pub sigma_param: Option<Vec<f64>>,
}

/// Variational parameters of one WHVI layer. Arrays hold all stacked blocks
/// back to back; `chol_offdiag` stores one row-major `D x D` matrix per block
/// of which only the strictly lower part is read.
#[derive(Debug, Clone, PartialEq)]
pub struct WhviPosterior {
    pub shape: WhviShape,
    pub structure: StructureSpec,
    pub covariance: Covariance,
    pub mu: Vec<f64>,
    pub sigma_param: Vec<f64>,
    pub chol_offdiag: Option<Vec<f64>>,
    pub s1: Option<SDiag>,
    pub s2: Option<SDiag>,
}

fn near_rademacher<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let z: f64 = rng.sample(StandardNormal);
            sign * (1.0 + 0.1 * z)
        })
        .collect()
}

impl WhviPosterior {
    /// Initializes close to a shrunk prior: `mu` is a prior draw, the
    /// posterior scale is `1e-3 sqrt(lambda)` and the `S` diagonals are
    /// near-Rademacher.
    pub fn init<R: Rng + ?Sized>(
        shape: WhviShape,
        structure: StructureSpec,
        covariance: Covariance,
        prior: PriorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        prior.check()?;
        let n = shape.g_len();
        let sd = prior.lambda.sqrt();
        let mu = (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let sigma_param = vec![softplus_inv(1e-3 * sd); n];
        let chol_offdiag = match covariance {
            Covariance::Diagonal => None,
            Covariance::Full => Some(vec![0.0; shape.stack * shape.d * shape.d]),
        };
        let make_s = |present: bool, rng: &mut R| {
            present.then(|| SDiag {
                mean: near_rademacher(n, rng),
                sigma_param: (structure.s_treatment == STreatment::Variational)
                    .then(|| vec![softplus_inv(1e-3); n]),
            })
        };
        let s1 = make_s(structure.kind.has_s1(), rng);
        let s2 = make_s(structure.kind.has_s2(), rng);
        Ok(Self { shape, structure, covariance, mu, sigma_param, chol_offdiag, s1, s2 })
    }

    /// A single-block posterior with the default structure and the given
    /// parameters, for algebraic work.
    pub fn from_parts(
        mu: Vec<f64>,
        sigma: &[f64],
        chol_offdiag: Option<Vec<f64>>,
        s1: Vec<f64>,
        s2: Vec<f64>,
    ) -> Result<Self> {
        let d = mu.len();
        if !d.is_power_of_two() || sigma.len() != d || s1.len() != d || s2.len() != d {
            return dim_err("posterior parts must share a power-of-two length");
        }
        if let Some(c) = &chol_offdiag {
            if c.len() != d * d {
                return dim_err("chol_offdiag must be D x D");
            }
        }
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Contract("sigma must be positive".into()));
        }
        Ok(Self {
            shape: WhviShape { din_orig: d, dout_orig: d, d, padding: 0, stack: 1 },
            structure: StructureSpec::default(),
            covariance: if chol_offdiag.is_some() { Covariance::Full } else { Covariance::Diagonal },
            mu,
            sigma_param: sigma.iter().map(|&s| softplus_inv(s)).collect(),
            chol_offdiag,
            s1: Some(SDiag { mean: s1, sigma_param: None }),
            s2: Some(SDiag { mean: s2, sigma_param: None }),
        })
    }

    pub fn d(&self) -> usize {
        self.shape.d
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.sigma_param.iter().map(|&x| softplus(x)).collect()
    }

    fn block<'a>(&self, v: &'a [f64], k: usize) -> &'a [f64] {
        let d = self.shape.d;
        &v[k * d..(k + 1) * d]
    }

    /// Lower-triangular root of block `k`'s covariance.
    pub fn sigma_root(&self, k: usize) -> DMatrix<f64> {
        let d = self.shape.d;
        let sig = self.sigma();
        let mut l = DMatrix::from_diagonal(&DVector::from_column_slice(self.block(&sig, k)));
        if let Some(c) = &self.chol_offdiag {
            let c = &c[k * d * d..(k + 1) * d * d];
            for i in 0..d {
                for j in 0..i {
                    l[(i, j)] = c[i * d + j];
                }
            }
        }
        l
    }

    pub fn sigma_matrix(&self, k: usize) -> DMatrix<f64> {
        let l = self.sigma_root(k);
        &l * l.transpose()
    }

    fn s_mean(&self, s: &Option<SDiag>, k: usize) -> Option<Vec<f64>> {
        s.as_ref().map(|s| self.block(&s.mean, k).to_vec())
    }

    /// `mu + Sigma^{1/2} noise` over all stacked blocks.
    pub fn sample_g(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.shape.g_len() {
            return dim_err(format!("noise has length {}, expected {}", noise.len(), self.shape.g_len()));
        }
        let d = self.shape.d;
        let mut out = Vec::with_capacity(noise.len());
        for k in 0..self.shape.stack {
            let root = self.sigma_root(k);
            let e = DVector::from_column_slice(&noise[k * d..(k + 1) * d]);
            let g = DVector::from_column_slice(self.block(&self.mu, k)) + root * e;
            out.extend(g.iter());
        }
        Ok(out)
    }

    /// Dense weight of block `k` for a given `g` block, using the `S` means.
    pub fn weight_block(&self, k: usize, g: &[f64]) -> Result<DMatrix<f64>> {
        structured_weight(
            self.structure.kind,
            self.s_mean(&self.s1, k).as_deref(),
            self.s_mean(&self.s2, k).as_deref(),
            g,
        )
    }

    /// Mean and input-dependent root of the output distribution of block `k`
    /// for input `h`: the output is `N(m, A_h A_hᵀ)`.
    pub fn local_moments(&self, k: usize, h: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.shape.d;
        if h.len() != d {
            return dim_err(format!("input has length {}, expected {d}", h.len()));
        }
        let kind = self.structure.kind;
        let s1 = self.s_mean(&self.s1, k);
        let s2 = self.s_mean(&self.s2, k);
        let inner = apply_inner(kind, s2.as_deref(), h)?;
        let mu = self.block(&self.mu, k);
        let mean_in: Vec<f64> = inner.iter().zip(mu).map(|(a, b)| a * b).collect();
        let m = DVector::from_vec(apply_outer(kind, s1.as_deref(), mean_in)?);
        let root = self.sigma_root(k);
        let mut a = DMatrix::zeros(d, d);
        for j in 0..d {
            let col: Vec<f64> = (0..d).map(|i| inner[i] * root[(i, j)]).collect();
            let col = apply_outer(kind, s1.as_deref(), col)?;
            a.set_column(j, &DVector::from_vec(col));
        }
        Ok((m, a))
    }
}

fn check_len(v: &[f64], d: usize, what: &str) -> Result<()> {
    if v.len() != d {
        return dim_err(format!("{what} has length {}, expected {d}", v.len()));
    }
    Ok(())
}

/// The part of `W h` before the `diag(g)` factor.
fn apply_inner(kind: StructureKind, s2: Option<&[f64]>, h: &[f64]) -> Result<Vec<f64>> {
    let mut v = h.to_vec();
    match kind {
        StructureKind::Gh | StructureKind::Shgh => fwht_inplace(&mut v, true)?,
        StructureKind::S1hghs2h => {
            fwht_inplace(&mut v, true)?;
            mul_in_place(&mut v, s2.expect("structure has s2"));
            fwht_inplace(&mut v, true)?;
        }
        StructureKind::S1hghs2 => {
            mul_in_place(&mut v, s2.expect("structure has s2"));
            fwht_inplace(&mut v, true)?;
        }
    }
    Ok(v)
}

/// The part of `W h` after the `diag(g)` factor.
fn apply_outer(kind: StructureKind, s1: Option<&[f64]>, mut v: Vec<f64>) -> Result<Vec<f64>> {
    if kind != StructureKind::Gh {
        fwht_inplace(&mut v, true)?;
        mul_in_place(&mut v, s1.expect("structure has s1"));
    }
    Ok(v)
}

fn mul_in_place(v: &mut [f64], s: &[f64]) {
    for (x, y) in v.iter_mut().zip(s) {
        *x *= y;
    }
}

/// Dense `D x D` weight of any structure, built one column at a time.
pub fn structured_weight(
    kind: StructureKind,
    s1: Option<&[f64]>,
    s2: Option<&[f64]>,
    g: &[f64],
) -> Result<DMatrix<f64>> {
    let d = g.len();
    if !d.is_power_of_two() {
        return dim_err(format!("block size {d} is not a power of two"));
    }
    if kind.has_s1() {
        check_len(s1.ok_or_else(|| Error::Contract("missing s1".into()))?, d, "s1")?;
    }
    if kind.has_s2() {
        check_len(s2.ok_or_else(|| Error::Contract("missing s2".into()))?, d, "s2")?;
    }
    let mut w = DMatrix::zeros(d, d);
    let mut e = vec![0.0; d];
    for j in 0..d {
        e.iter_mut().for_each(|x| *x = 0.0);
        e[j] = 1.0;
        let mut v = apply_inner(kind, s2, &e)?;
        mul_in_place(&mut v, g);
        let col = apply_outer(kind, s1, v)?;
        w.set_column(j, &DVector::from_vec(col));
    }
    Ok(w)
}

/// `diag(s1) H diag(g) H diag(s2)` with orthonormal `H`.
pub fn materialize_weight(s1: &[f64], s2: &[f64], g: &[f64]) -> Result<DMatrix<f64>> {
    check_len(s1, g.len(), "s1")?;
    check_len(s2, g.len(), "s2")?;
    structured_weight(StructureKind::S1hghs2, Some(s1), Some(s2), g)
}

/// Columns of the orthonormal Hadamard matrix, `cols[i] = H e_i`.
fn hadamard_columns(d: usize) -> Result<Vec<Vec<f64>>> {
    (0..d)
        .map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            fwht_inplace(&mut e, true)?;
            Ok(e)
        })
        .collect()
}

fn dense_guard(d: usize) -> Result<()> {
    if d > DENSE_LIMIT {
        return Err(Error::Size(format!("dense construction limited to D <= {DENSE_LIMIT}, got {d}")));
    }
    Ok(())
}

/// The `D² x D` matrix with `vect(W) = A g`; block `i` is
/// `S1 H diag(s2_i H[:, i])`.
pub fn build_a_matrix(s1: &[f64], s2: &[f64]) -> Result<DMatrix<f64>> {
    let d = s1.len();
    check_len(s2, d, "s2")?;
    if !d.is_power_of_two() {
        return dim_err(format!("block size {d} is not a power of two"));
    }
    let hcols = hadamard_columns(d)?;
    let mut a = DMatrix::zeros(d * d, d);
    for (i, hi) in hcols.iter().enumerate() {
        for k in 0..d {
            // column k of S1 H diag(v_i) is v_ik * s1 ⊙ H[:, k]
            let vik = s2[i] * hi[k];
            for r in 0..d {
                a[(i * d + r, k)] = s1[r] * hcols[k][r] * vik;
            }
        }
    }
    Ok(a)
}

/// Column-wise vectorization.
pub fn vect(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Matrix-variate parameters `(M, U^{1/2}, V^{1/2})` of one block.
#[derive(Debug, Clone)]
pub struct MatrixVariate {
    pub m: DMatrix<f64>,
    /// `D x D²`.
    pub u_root: DMatrix<f64>,
    /// `D x D²`, scaled so that `tr(V) = 1`; absent when `tr(U) = 0`.
    pub v_root: Option<DMatrix<f64>>,
    pub degenerate: bool,
}

impl MatrixVariate {
    pub fn u(&self) -> DMatrix<f64> {
        &self.u_root * self.u_root.transpose()
    }

    pub fn v(&self) -> Option<DMatrix<f64>> {
        self.v_root.as_ref().map(|r| r * r.transpose())
    }

    /// `V ⊗ U`, the covariance of `vect(W)` under the matrix-variate form.
    pub fn kron_covariance(&self) -> Option<DMatrix<f64>> {
        self.v().map(|v| v.kronecker(&self.u()))
    }
}

/// `D x D²` matrix whose row `i` is the column-wise vectorization of
/// `(root[i, j] * hs[i, j'])_{j, j'}`.
fn t_matrix(root: &DMatrix<f64>, hs: &DMatrix<f64>) -> DMatrix<f64> {
    let d = root.nrows();
    let mut t = DMatrix::zeros(d, d * d);
    for i in 0..d {
        for jp in 0..d {
            for j in 0..d {
                t[(i, j + jp * d)] = root[(i, j)] * hs[(i, jp)];
            }
        }
    }
    t
}

/// `diag(s) H X` computed with the transform on each column of `X`.
fn s_h_times(s: &[f64], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mut v: Vec<f64> = col.iter().copied().collect();
        fwht_inplace(&mut v, true)?;
        for (c, (vi, si)) in col.iter_mut().zip(v.iter().zip(s)) {
            *c = vi * si;
        }
    }
    Ok(out)
}

/// Matrix-variate parameters of block `k` of a default-structure posterior.
pub fn matrix_variate_params(post: &WhviPosterior, k: usize) -> Result<MatrixVariate> {
    let d = post.d();
    dense_guard(d)?;
    if post.structure.kind != StructureKind::S1hghs2 {
        return Err(Error::Contract("matrix-variate form is defined for S1 H G H S2".into()));
    }
    let s1 = post.s_mean(&post.s1, k).expect("default structure has s1");
    let s2 = post.s_mean(&post.s2, k).expect("default structure has s2");
    let mu = post.block(&post.mu, k);
    let m = materialize_weight(&s1, &s2, mu)?;
    let root = post.sigma_root(k);
    let ones = vec![1.0; d];
    let hs1 = s_h_times(&ones, &DMatrix::from_diagonal(&DVector::from_column_slice(&s1)))?;
    let hs2 = s_h_times(&ones, &DMatrix::from_diagonal(&DVector::from_column_slice(&s2)))?;
    let u_root = s_h_times(&s1, &t_matrix(&root, &hs2))?;
    let tr_u = u_root.norm_squared();
    if tr_u == 0.0 {
        return Ok(MatrixVariate { m, u_root, v_root: None, degenerate: true });
    }
    let v_root = s_h_times(&s2, &t_matrix(&root, &hs1))? / tr_u.sqrt();
    Ok(MatrixVariate { m, u_root, v_root: Some(v_root), degenerate: false })
}

/// `A = L Q` with `L` diagonal.
#[derive(Debug, Clone)]
pub struct LqFactors {
    /// Diagonal of `L`, length `D²`.
    pub l_diag: DVector<f64>,
    /// `D² x D` with orthonormal columns.
    pub q: DMatrix<f64>,
}

impl LqFactors {
    pub fn product(&self) -> DMatrix<f64> {
        let mut a = self.q.clone();
        for (mut row, l) in a.row_iter_mut().zip(self.l_diag.iter()) {
            row *= *l;
        }
        a
    }
}

pub fn lq_factors(s1: &[f64], s2: &[f64]) -> Result<LqFactors> {
    let d = s1.len();
    check_len(s2, d, "s2")?;
    if !d.is_power_of_two() {
        return dim_err(format!("block size {d} is not a power of two"));
    }
    dense_guard(d)?;
    let hcols = hadamard_columns(d)?;
    let mut l_diag = DVector::zeros(d * d);
    let mut q = DMatrix::zeros(d * d, d);
    for i in 0..d {
        for r in 0..d {
            l_diag[i * d + r] = s2[i] * s1[r];
            for k in 0..d {
                // H diag(h_i): entry (r, k) = H[r, k] * H[k, i]
                q[(i * d + r, k)] = hcols[k][r] * hcols[i][k];
            }
        }
    }
    Ok(LqFactors { l_diag, q })
}

/// Closed-form `KL(N(mu, Sigma) || N(0, lambda I))` summed over blocks, plus
/// the mean-field KL of variational `S` diagonals against `N(0, 1)`.
pub fn kl_to_prior(post: &WhviPosterior, prior: PriorConfig) -> Result<f64> {
    prior.check()?;
    let lam = prior.lambda;
    let d = post.d();
    let mut kl = 0.0;
    for k in 0..post.shape.stack {
        let root = post.sigma_root(k);
        let tr = root.norm_squared();
        let logdet: f64 = (0..d).map(|i| 2.0 * root[(i, i)].ln()).sum();
        let mu2: f64 = post.block(&post.mu, k).iter().map(|x| x * x).sum();
        kl += 0.5 * (tr / lam + mu2 / lam - d as f64 - logdet + d as f64 * lam.ln());
    }
    for s in [&post.s1, &post.s2].into_iter().flatten() {
        if let Some(sp) = &s.sigma_param {
            kl += meanfield_kl(&s.mean, sp, 1.0);
        }
    }
    Ok(kl)
}

/// `Σ KL(N(m_i, softplus(p_i)²) || N(0, lambda))`.
pub fn meanfield_kl(mean: &[f64], sigma_param: &[f64], lambda: f64) -> f64 {
    mean.iter()
        .zip(sigma_param)
        .map(|(&m, &p)| {
            let v = softplus(p).powi(2);
            0.5 * (v / lambda + m * m / lambda - 1.0 - v.ln() + lambda.ln())
        })
        .sum()
}

/// Variational parameter count: `stack (2D + |s|)` with diagonal covariance.
pub fn layer_param_count(shape: WhviShape, structure: StructureSpec) -> usize {
    let per_s = match structure.s_treatment {
        STreatment::Optimized => 1,
        STreatment::Variational => 2,
    };
    shape.stack * (2 * shape.d + structure.kind.n_s() * per_s * shape.d)
}

/// `2 din dout`: a mean and a scale per weight.
pub fn meanfield_param_count(din: usize, dout: usize) -> usize {
    2 * din * dout
}

const MU: &str = "mu";
const SIGMA: &str = "sigma_param";
const CHOL: &str = "chol_offdiag";
const S1: &str = "s1";
const S1_SIGMA: &str = "s1_sigma_param";
const S2: &str = "s2";
const S2_SIGMA: &str = "s2_sigma_param";

fn key(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl WhviPosterior {
    /// Writes every array under `prefix.name`.
    pub fn write_params(&self, set: &mut ParamSet, prefix: &str) {
        set.insert(key(prefix, MU), self.mu.clone());
        set.insert(key(prefix, SIGMA), self.sigma_param.clone());
        if let Some(c) = &self.chol_offdiag {
            set.insert(key(prefix, CHOL), c.clone());
        }
        for (s, m, p) in [(&self.s1, S1, S1_SIGMA), (&self.s2, S2, S2_SIGMA)] {
            if let Some(s) = s {
                set.insert(key(prefix, m), s.mean.clone());
                if let Some(sp) = &s.sigma_param {
                    set.insert(key(prefix, p), sp.clone());
                }
            }
        }
    }

    /// Reads a posterior written by [`WhviPosterior::write_params`].
    pub fn read_params(
        shape: WhviShape,
        structure: StructureSpec,
        covariance: Covariance,
        set: &ParamSet,
        prefix: &str,
    ) -> Result<Self> {
        let n = shape.g_len();
        let get = |name: &str, len: usize| -> Result<Vec<f64>> {
            let v = set.require(&key(prefix, name))?;
            check_len(v, len, name)?;
            Ok(v.to_vec())
        };
        let var = structure.s_treatment == STreatment::Variational;
        let read_s = |present: bool, m: &str, p: &str| -> Result<Option<SDiag>> {
            if !present {
                return Ok(None);
            }
            Ok(Some(SDiag { mean: get(m, n)?, sigma_param: if var { Some(get(p, n)?) } else { None } }))
        };
        Ok(Self {
            shape,
            structure,
            covariance,
            mu: get(MU, n)?,
            sigma_param: get(SIGMA, n)?,
            chol_offdiag: match covariance {
                Covariance::Diagonal => None,
                Covariance::Full => Some(get(CHOL, shape.stack * shape.d * shape.d)?),
            },
            s1: read_s(structure.kind.has_s1(), S1, S1_SIGMA)?,
            s2: read_s(structure.kind.has_s2(), S2, S2_SIGMA)?,
        })
    }
}

/// Draws standard normal noise of length `n`.
pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    StandardNormal.sample_iter(rng).take(n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn setup_dimension_traces() {
        let s = setup_dimensions(128, 128);
        assert_eq!((s.d, s.padding, s.stack), (128, 0, 1));
        let s = setup_dimensions(3, 5);
        assert_eq!((s.d, s.padding, s.stack, s.dout_padded()), (4, 1, 2, 8));
        let s = setup_dimensions(6, 6);
        assert_eq!((s.d, s.padding, s.stack), (8, 2, 1));
        let s = setup_dimensions(1, 1);
        assert_eq!((s.d, s.padding, s.stack), (1, 0, 1));
    }

    #[test]
    fn reshape_shapes() {
        assert_eq!(reshape_vector_shape(16).d, 4);
        assert_eq!(reshape_vector_shape(17).d, 8);
        assert_eq!(reshape_vector_shape(1).d, 1);
        assert_eq!(reshape_vector_shape(4096).d, 64);
    }

    #[test]
    fn identity_when_g_and_s_are_ones() {
        let one = vec![1.0; 8];
        let w = materialize_weight(&one, &one, &one).unwrap();
        assert!((w - DMatrix::identity(8, 8)).abs().max() < 1e-14);
        let w = materialize_weight(&one, &one, &[0.0; 8]).unwrap();
        assert_eq!(w.abs().max(), 0.0);
    }

    #[test]
    fn sample_g_examples() {
        let post = WhviPosterior::from_parts(vec![1.0, 2.0], &[0.5, 0.25], None, vec![1.0; 2], vec![1.0; 2])
            .unwrap();
        let g = post.sample_g(&[0.0, 0.0]).unwrap();
        assert_eq!(g, vec![1.0, 2.0]);
        let g = post.sample_g(&[1.0, 0.0]).unwrap();
        assert!((g[0] - 1.5).abs() < 1e-12 && (g[1] - 2.0).abs() < 1e-12);
        assert!(post.sample_g(&[1.0]).is_err());
    }

    #[test]
    fn a_matrix_shape_and_zero() {
        let a = build_a_matrix(&[1.0; 4], &[-1.0; 4]).unwrap();
        assert_eq!(a.shape(), (16, 4));
        assert_eq!((a * DVector::zeros(4)).abs().max(), 0.0);
        assert!(build_a_matrix(&[1.0; 4], &[1.0; 2]).is_err());
    }

    #[test]
    fn dense_guard_applies() {
        let s = vec![1.0; 128];
        assert!(matches!(lq_factors(&s, &s), Err(Error::Size(_))));
    }

    #[test]
    fn zero_sigma_is_degenerate() {
        let mut post =
            WhviPosterior::from_parts(vec![0.3; 4], &[1.0; 4], None, vec![1.0; 4], vec![1.0; 4]).unwrap();
        post.sigma_param = vec![-1e4; 4];
        let mv = matrix_variate_params(&post, 0).unwrap();
        assert!(mv.degenerate && mv.v_root.is_none());
        assert_eq!(mv.u_root.abs().max(), 0.0);
    }

    #[test]
    fn kl_closed_form_cases() {
        let prior = PriorConfig::new(1.0).unwrap();
        let post = WhviPosterior::from_parts(vec![1.0], &[1.0], None, vec![1.0], vec![1.0]).unwrap();
        assert!((kl_to_prior(&post, prior).unwrap() - 0.5).abs() < 1e-12);
        let lam: f64 = 0.3;
        let post =
            WhviPosterior::from_parts(vec![0.0; 4], &[lam.sqrt(); 4], None, vec![1.0; 4], vec![1.0; 4])
                .unwrap();
        assert!(kl_to_prior(&post, PriorConfig { lambda: lam }).unwrap().abs() < 1e-12);
        assert!(kl_to_prior(&post, PriorConfig { lambda: 0.0 }).is_err());
    }

    #[test]
    fn param_counts() {
        let s = setup_dimensions(512, 512);
        assert_eq!(layer_param_count(s, StructureSpec::default()), 2048);
        assert_eq!(meanfield_param_count(512, 512), 524_288);
        let gh = StructureSpec { kind: StructureKind::Gh, s_treatment: STreatment::Optimized };
        assert_eq!(layer_param_count(setup_dimensions(3, 5), gh), 2 * 2 * 4);
    }

    #[test]
    fn init_respects_structure() {
        let shape = setup_dimensions(6, 10);
        let var = StructureSpec { kind: StructureKind::Shgh, s_treatment: STreatment::Variational };
        let post = WhviPosterior::init(shape, var, Covariance::Full, PriorConfig { lambda: 0.5 }, &mut rng())
            .unwrap();
        assert_eq!(post.mu.len(), 16);
        assert!(post.s1.as_ref().unwrap().sigma_param.is_some());
        assert!(post.s2.is_none());
        assert!(post.sigma().iter().all(|&s| (s - 1e-3 * 0.5f64.sqrt()).abs() < 1e-12));
        let mut set = ParamSet::new();
        post.write_params(&mut set, "l0");
        let back = WhviPosterior::read_params(shape, var, Covariance::Full, &set, "l0").unwrap();
        assert_eq!(back, post);
        assert_eq!(set.count(), 16 * 4 + 2 * 64);
    }
}
