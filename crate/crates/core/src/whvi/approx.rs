//! Best structured approximation of a fixed matrix.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::params::{Adam, ParamSet};

use super::{apply_structure, standard_normal, StructureKind, WhviShape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproxOptions {
    pub iters: usize,
    pub restarts: usize,
    /// Initial Adam step; decays geometrically to `lr * final_lr_ratio`.
    pub lr: f64,
    pub final_lr_ratio: f64,
}

impl Default for ApproxOptions {
    fn default() -> Self {
        Self { iters: 3000, restarts: 3, lr: 0.05, final_lr_ratio: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApproxResult {
    /// `(1/D) ||Gamma - S1 H diag(g) H S2||_F` at the best point found.
    pub best_rmse: f64,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub g: Vec<f64>,
}

/// Minimizes `(1/D) ||Gamma - S1 H diag(g) H S2||_F` over `(s1, s2, g)` with
/// Adam from `restarts` random starts. The all-zero weight is always a
/// candidate.
pub fn approximate_matrix<R: Rng + ?Sized>(
    gamma: &DMatrix<f64>,
    opts: &ApproxOptions,
    rng: &mut R,
) -> Result<ApproxResult> {
    let d = gamma.nrows();
    if gamma.ncols() != d || !d.is_power_of_two() {
        return Err(Error::Dimension(format!("target must be square with power-of-two side, got {:?}", gamma.shape())));
    }
    if gamma.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("target has non-finite entries".into()));
    }
    let shape = WhviShape { din_orig: d, dout_orig: d, d, padding: 0, stack: 1 };
    // Feeding the identity returns row j = column j of W, i.e. Wᵀ in
    // row-major order; Gammaᵀ row-major is Gamma's column-major storage.
    let target: Vec<f64> = gamma.as_slice().to_vec();
    let eye: Vec<f64> = DMatrix::<f64>::identity(d, d).as_slice().to_vec();

    let mut best = ApproxResult {
        best_rmse: gamma.norm() / d as f64,
        s1: vec![1.0; d],
        s2: vec![1.0; d],
        g: vec![0.0; d],
    };
    for _ in 0..opts.restarts {
        let mut set = ParamSet::new();
        set.insert("s1", standard_normal(d, rng));
        set.insert("s2", standard_normal(d, rng));
        set.insert("g", standard_normal(d, rng));
        let mut groups = vec![set];
        let mut adam = Adam::new();
        let decay = opts.final_lr_ratio.powf(1.0 / opts.iters.max(1) as f64);
        let mut lr = opts.lr;
        for _ in 0..=opts.iters {
            let p = &groups[0];
            let mut tape = Tape::new();
            let s1 = tape.param_vec(p.require("s1")?);
            let s2 = tape.param_vec(p.require("s2")?);
            let g = tape.param_vec(p.require("g")?);
            let x = tape.constant(eye.clone(), &[d, d])?;
            let t = tape.constant(target.clone(), &[d, d])?;
            let w = apply_structure(&mut tape, StructureKind::S1hghs2, shape, x, g, Some(s1), Some(s2))?;
            let diff = tape.sub(w, t)?;
            let sq = tape.square(diff);
            let loss = tape.sum(sq);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                break;
            }
            let rmse = value.sqrt() / d as f64;
            if rmse < best.best_rmse {
                best = ApproxResult {
                    best_rmse: rmse,
                    s1: p.require("s1")?.to_vec(),
                    s2: p.require("s2")?.to_vec(),
                    g: p.require("g")?.to_vec(),
                };
            }
            let grads = tape.backward(loss)?;
            let mut gs = ParamSet::new();
            gs.insert("s1", grads.wrt(s1, d));
            gs.insert("s2", grads.wrt(s2, d));
            gs.insert("g", grads.wrt(g, d));
            adam.step(&mut groups, &[gs], lr)?;
            lr *= decay;
        }
    }
    Ok(best)
}
