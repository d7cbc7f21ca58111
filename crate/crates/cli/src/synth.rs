//! Seeded synthetic datasets used by the demos and the acceptance suite.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use whvi::bnn::{Data, Targets};
use whvi::whvi::standard_normal;

/// 1D regression with a hole in the inputs.
#[derive(Debug, Clone)]
pub struct ToyRegression {
    pub data: Data,
    /// Inputs in `gap` were removed.
    pub gap: (f64, f64),
    pub domain: (f64, f64),
    pub noise_var: f64,
    /// The noise-free function, for plotting.
    pub f: RandomFunction,
}

/// `f(x) = Σ a_k cos(w_k x + p_k)`, a smooth random function with unit
/// prior variance.
#[derive(Debug, Clone)]
pub struct RandomFunction {
    a: Vec<f64>,
    w: Vec<f64>,
    p: Vec<f64>,
}

impl RandomFunction {
    pub fn sample(terms: usize, freq_scale: f64, rng: &mut impl Rng) -> Self {
        let amp = (2.0 / terms as f64).sqrt();
        Self {
            a: standard_normal(terms, rng).into_iter().map(|v| v * amp).collect(),
            w: standard_normal(terms, rng).into_iter().map(|v| v * freq_scale).collect(),
            p: (0..terms).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.a.iter().zip(&self.w).zip(&self.p).map(|((a, w), p)| a * (w * x + p).cos()).sum()
    }
}

/// `n` inputs uniform on `[-1, 2]` outside the gap `[0.25, 0.85]` (a fifth
/// of the domain), noisy targets with variance `exp(-3)`.
pub fn toy_regression(n: usize, seed: u64) -> ToyRegression {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain = (-1.0, 2.0);
    let gap = (0.25, 0.85);
    let noise_var = (-3.0f64).exp();
    let f = RandomFunction::sample(12, 3.0, &mut rng);
    let mut x = Vec::with_capacity(n);
    while x.len() < n {
        let v = rng.random_range(domain.0..domain.1);
        if !(gap.0..=gap.1).contains(&v) {
            x.push(v);
        }
    }
    let y = x.iter().map(|&v| f.eval(v) + noise_var.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let data = Data::new(x, 1, Targets::Real(y)).expect("consistent sizes");
    ToyRegression { data, gap, domain, noise_var, f }
}

/// Labels from a random two-layer tanh teacher on Gaussian inputs. The
/// `margin` scales the teacher logits; larger is easier.
pub fn teacher_classification(n: usize, din: usize, classes: usize, margin: f64, seed: u64) -> Data {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = 32;
    let w1 = DMatrix::from_vec(din, hidden, standard_normal(din * hidden, &mut rng)) / (din as f64).sqrt();
    let w2 = DMatrix::from_vec(hidden, classes, standard_normal(hidden * classes, &mut rng)) * (margin / (hidden as f64).sqrt());
    let x = standard_normal(n * din, &mut rng);
    let xm = DMatrix::from_row_slice(n, din, &x);
    let logits = (xm * w1).map(f64::tanh) * w2;
    let labels = (0..n).map(|i| logits.row(i).transpose().argmax().0).collect();
    Data::new(x, din, Targets::Labels(labels)).expect("consistent sizes")
}

/// Squared-exponential kernel `sigma² exp(-|x - x'|² / (2 l²))` between the
/// rows of two 1D input sets.
fn rbf_1d(a: &[f64], b: &[f64], lengthscale: f64, signal_var: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let r = (a[i] - b[j]) / lengthscale;
        signal_var * (-0.5 * r * r).exp()
    })
}

/// A draw from a zero-mean GP on `n` uniform inputs in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GpDraw {
    pub x: Vec<f64>,
    pub f: Vec<f64>,
    pub y: Vec<f64>,
    pub lengthscale: f64,
    pub signal_var: f64,
    pub noise_std: f64,
}

pub fn gp_draw_1d(n: usize, lengthscale: f64, signal_var: f64, noise_std: f64, seed: u64) -> GpDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut k = rbf_1d(&x, &x, lengthscale, signal_var);
    for i in 0..n {
        k[(i, i)] += 1e-8 * signal_var;
    }
    let l = k.cholesky().expect("jittered kernel is positive definite").l();
    let f: Vec<f64> = (l * DVector::from_vec(standard_normal(n, &mut rng))).iter().copied().collect();
    let y = f.iter().map(|v| v + noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    GpDraw { x, f, y, lengthscale, signal_var, noise_std }
}
