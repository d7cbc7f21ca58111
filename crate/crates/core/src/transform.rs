//! Fast Walsh-Hadamard transform and the Fastfood random-matrix sampler.
//!
//! The kernel is the classic iterative butterfly: `log2(D)` passes, each one
//! pairing entries `stride` apart and replacing them with their sum and
//! difference. It runs in `O(D log D)` time with no auxiliary storage.
//!
//! Two conventions are supported. The unnormalized transform multiplies by the
//! Sylvester matrix `H` with entries `±1`, so `H·H = D·I`. The normalized
//! transform scales by `D^{-1/2}` which makes it orthonormal and an involution.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{dim_err, Result};

/// Rows below this many total entries are transformed sequentially.
const PAR_THRESHOLD: usize = 1 << 16;

/// Validated power-of-two transform length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HadamardDim {
    log2: u32,
}

// A transform length is a power of two, never zero.
#[allow(clippy::len_without_is_empty)]
impl HadamardDim {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 || !len.is_power_of_two() {
            return dim_err(format!("transform length {len} is not a power of two"));
        }
        Ok(Self { log2: len.trailing_zeros() })
    }

    pub fn from_log2(log2: u32) -> Self {
        Self { log2 }
    }

    pub fn len(self) -> usize {
        1usize << self.log2
    }

    pub fn log2(self) -> u32 {
        self.log2
    }

    /// Scale applied once per normalized transform.
    pub fn norm_scale(self) -> f64 {
        1.0 / (self.len() as f64).sqrt()
    }
}

#[inline]
fn butterfly(v: &mut [f64]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for block in v.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

/// In-place transform of `v`. The length must be a power of two.
pub fn fwht_inplace(v: &mut [f64], normalized: bool) -> Result<()> {
    let dim = HadamardDim::new(v.len())?;
    butterfly(v);
    if normalized && dim.log2 > 0 {
        let scale = dim.norm_scale();
        v.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(())
}

/// Returns `H·v` (or `D^{-1/2} H·v` when `normalized`), leaving `v` untouched.
pub fn fwht(v: &[f64], normalized: bool) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    fwht_inplace(&mut out, normalized)?;
    Ok(out)
}

/// Transforms every contiguous chunk of length `dim` in a row-major buffer.
///
/// Rows are independent, so the parallel path is bitwise identical to the
/// sequential one.
pub fn fwht_batch_inplace(buf: &mut [f64], dim: usize, normalized: bool) -> Result<()> {
    let hd = HadamardDim::new(dim)?;
    if !buf.len().is_multiple_of(dim) {
        return dim_err(format!(
            "buffer of length {} is not a whole number of rows of length {dim}",
            buf.len()
        ));
    }
    let scale = hd.norm_scale();
    let row = |r: &mut [f64]| {
        butterfly(r);
        if normalized && hd.log2 > 0 {
            r.iter_mut().for_each(|x| *x *= scale);
        }
    };
    if buf.len() >= PAR_THRESHOLD && buf.len() / dim > 1 {
        buf.par_chunks_mut(dim).for_each(row);
    } else {
        buf.chunks_mut(dim).for_each(row);
    }
    Ok(())
}

/// Row-wise transform of a `B×D` matrix.
pub fn fwht_batch(m: &DMatrix<f64>, normalized: bool) -> Result<DMatrix<f64>> {
    // Columns of the transpose are the rows of `m`, contiguous in memory.
    let mut t = m.transpose();
    fwht_batch_inplace(t.as_mut_slice(), m.ncols(), normalized)?;
    Ok(t.transpose())
}

/// Dense unnormalized Hadamard matrix built by the Sylvester doubling
/// `H_{2D} = [[H_D, H_D], [H_D, -H_D]]`. Only meant for checking the fast path.
pub fn hadamard_dense(d: usize) -> Result<DMatrix<f64>> {
    HadamardDim::new(d)?;
    let mut h = DMatrix::from_element(1, 1, 1.0);
    while h.nrows() < d {
        let n = h.nrows();
        let mut next = DMatrix::zeros(2 * n, 2 * n);
        next.view_mut((0, 0), (n, n)).copy_from(&h);
        next.view_mut((0, n), (n, n)).copy_from(&h);
        next.view_mut((n, 0), (n, n)).copy_from(&h);
        next.view_mut((n, n), (n, n)).copy_from(&(-&h));
        h = next;
    }
    Ok(h)
}

/// The diagonal and permutation factors of `Ω ≈ S H G Π H B`.
#[derive(Debug, Clone, PartialEq)]
pub struct FastfoodFactors {
    pub s: Vec<f64>,
    pub g: Vec<f64>,
    pub b: Vec<f64>,
    /// `perm[i]` is the source index moved to position `i`.
    pub perm: Vec<usize>,
}

impl FastfoodFactors {
    /// Draws `G ~ N(0, I)`, `B` Rademacher, `Π` uniform, and
    /// `s_i = r_i / (‖g‖ √D)` with `r_i² ~ χ²(D)`.
    ///
    /// The `1/√D` absorbs the two unnormalized transforms so that entries of
    /// the assembled matrix have unit variance.
    pub fn sample<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self> {
        HadamardDim::new(d)?;
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..d)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(rng);
        let chi = ChiSquared::new(d as f64).expect("positive degrees of freedom");
        let g_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let root_d = (d as f64).sqrt();
        let s = (0..d)
            .map(|_| {
                let r = chi.sample(rng).sqrt();
                if g_norm > 0.0 {
                    r / (g_norm * root_d)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self { s, g, b, perm })
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    fn check(&self) -> Result<()> {
        let d = self.g.len();
        HadamardDim::new(d)?;
        if self.s.len() != d || self.b.len() != d || self.perm.len() != d {
            return dim_err("fastfood factors have inconsistent lengths");
        }
        let mut seen = vec![false; d];
        for &p in &self.perm {
            if p >= d || std::mem::replace(&mut seen[p], true) {
                return dim_err("fastfood permutation is not a bijection");
            }
        }
        Ok(())
    }

    /// Assembles `S H G Π H B` column by column with the unnormalized transform.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        self.check()?;
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        let mut col = vec![0.0; d];
        let mut permuted = vec![0.0; d];
        for j in 0..d {
            col.iter_mut().for_each(|x| *x = 0.0);
            col[j] = self.b[j];
            fwht_inplace(&mut col, false)?;
            for (i, &p) in self.perm.iter().enumerate() {
                permuted[i] = col[p] * self.g[i];
            }
            fwht_inplace(&mut permuted, false)?;
            for i in 0..d {
                out[(i, j)] = self.s[i] * permuted[i];
            }
        }
        Ok(out)
    }
}

/// Draws a `D×D` Fastfood matrix whose entries are approximately i.i.d.
/// standard normal.
pub fn fastfood_sample<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    FastfoodFactors::sample(d, rng)?.to_matrix()
}
