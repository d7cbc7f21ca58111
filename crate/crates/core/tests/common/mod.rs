#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use whvi::autodiff::{Tape, Var};
use whvi::params::ParamSet;
use whvi::Result;

/// Orthonormal Sylvester-Hadamard matrix from the bit-parity formula.
pub fn hadamard(d: usize) -> DMatrix<f64> {
    let s = 1.0 / (d as f64).sqrt();
    DMatrix::from_fn(d, d, |i, j| if (i & j).count_ones() % 2 == 0 { s } else { -s })
}

pub fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

pub fn rel_frobenius(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).norm() / want.norm()
}

/// Sample mean and (biased) covariance of the columns of `xs`.
pub fn moments(xs: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mean = xs.iter().fold(DVector::zeros(d), |acc, x| acc + x) / n;
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        let c = x - &mean;
        cov += &c * c.transpose();
    }
    (mean, cov / n)
}

/// Gauss-Hermite rule for `∫ e^{-t²} f(t) dt` via the Golub-Welsch
/// eigenproblem.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let root_pi = std::f64::consts::PI.sqrt();
    let weights = (0..n).map(|i| root_pi * eig.eigenvectors[(0, i)].powi(2)).collect();
    (eig.eigenvalues.iter().copied().collect(), weights)
}

/// Names and lengths of every array in `params`, in iteration order.
pub fn layout(params: &ParamSet) -> Vec<(String, usize)> {
    params.iter().map(|(n, v)| (n.to_string(), v.len())).collect()
}

pub fn flatten(params: &ParamSet) -> Vec<f64> {
    params.iter().flat_map(|(_, v)| v.iter().copied()).collect()
}

/// Splits one flat leaf into named handles following `layout`.
pub fn unflatten(tape: &mut Tape, leaf: Var, layout: &[(String, usize)]) -> Result<BTreeMap<String, Var>> {
    let mut out = BTreeMap::new();
    let mut at = 0;
    for (name, len) in layout {
        out.insert(name.clone(), tape.slice(leaf, at, *len)?);
        at += len;
    }
    Ok(out)
}
