mod common;

use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use whvi::autodiff::{finite_diff_check, softplus, softplus_inv};
use whvi::bnn::{elbo_graph, Activation, Data, LayerKind, LayerSpec, Model, NetworkConfig, NoiseBundle, Targets};
use whvi::flows::*;
use whvi::whvi::{meanfield_kl, standard_normal, PriorConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_flow(d: usize, r: &mut ChaCha8Rng) -> PlanarFlowParams {
    PlanarFlowParams {
        u: (0..d).map(|_| r.random_range(-2.0..2.0)).collect(),
        w: (0..d).map(|_| r.random_range(-2.0..2.0)).collect(),
        b: r.random_range(-1.0..1.0),
    }
}

/// `log |det J|` from a central-difference Jacobian.
fn brute_force_logdet(f: &PlanarFlowParams, z: &[f64]) -> f64 {
    let d = z.len();
    let h = 1e-6;
    let mut j = DMatrix::zeros(d, d);
    for c in 0..d {
        let mut up = z.to_vec();
        let mut down = z.to_vec();
        up[c] += h;
        down[c] -= h;
        let (fu, _) = flow_forward(f, &up).unwrap();
        let (fd, _) = flow_forward(f, &down).unwrap();
        for r in 0..d {
            j[(r, c)] = (fu[r] - fd[r]) / (2.0 * h);
        }
    }
    j.determinant().abs().ln()
}

#[test]
fn logdet_matches_brute_force_jacobian() {
    let mut r = rng(1);
    for d in [1, 2, 3, 5] {
        for _ in 0..100 {
            let f = random_flow(d, &mut r).adjusted().unwrap();
            let z: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let (_, ld) = flow_forward(&f, &z).unwrap();
            let want = brute_force_logdet(&f, &z);
            assert!((ld - want).abs() <= 1e-5, "D={d}: {ld} vs {want}");
        }
    }
}

#[test]
fn zero_u_is_identity_with_zero_logdet() {
    let mut r = rng(2);
    for d in [1, 2, 3, 5] {
        let mut f = random_flow(d, &mut r);
        f.u = vec![0.0; d];
        let z = standard_normal(d, &mut r);
        let (out, ld) = flow_forward(&f, &z).unwrap();
        assert_eq!(out, z);
        assert_eq!(ld, 0.0);
    }
}

#[test]
fn scalar_flow_value() {
    let f = PlanarFlowParams { u: vec![0.5], w: vec![1.0], b: 0.0 };
    let (out, ld) = flow_forward(&f, &[0.0]).unwrap();
    assert_eq!(out, vec![0.0]);
    assert!((ld - 1.5f64.ln()).abs() < 1e-15);
}

#[test]
fn adjustment_at_orthogonal_u() {
    let u = vec![1.0, 0.0];
    let w = vec![0.0, 2.0];
    let got = invertibility_adjust(&u, &w).unwrap();
    let c = (2f64.ln() - 1.0) / 4.0;
    assert!((got[0] - 1.0).abs() < 1e-15);
    assert!((got[1] - 2.0 * c).abs() < 1e-15);
}

#[test]
fn zero_u_chain_without_adjustment_is_base_sampler() {
    let mut r = rng(3);
    let d = 4;
    let mu0 = standard_normal(d, &mut r);
    let sp = standard_normal(d, &mut r);
    let mut chain = FlowChain::init(mu0.clone(), sp.clone(), 3, &mut r);
    chain.adjust = false;
    chain.flows.iter_mut().for_each(|f| f.u = vec![0.0; d]);
    let e = standard_normal(d, &mut r);
    let terms = flow_elbo_terms(&chain, &e, PriorConfig::new(1.0).unwrap()).unwrap();
    let base: Vec<f64> = (0..d).map(|i| mu0[i] + softplus(sp[i]) * e[i]).collect();
    assert_eq!(terms.z_k, base);
    assert_eq!(terms.sum_logdet, 0.0);
}

#[test]
fn flows_add_linear_parameter_counts() {
    let mut r = rng(4);
    for d in [1, 8, 64] {
        for k in 0..4 {
            let chain = FlowChain::init(vec![0.0; d], vec![0.0; d], k, &mut r);
            assert_eq!(chain.param_count(), 2 * d + k * (2 * d + 1));
        }
    }
}

#[test]
fn empty_chain_estimate_is_unbiased_for_gaussian_kl() {
    let mut r = rng(5);
    let d = 3;
    let mu0 = vec![0.5, -1.0, 0.2];
    let sp: Vec<f64> = [0.4, 0.9, 1.3].iter().map(|&s| softplus_inv(s)).collect();
    let lambda = 0.8;
    let chain = FlowChain { mu0: mu0.clone(), sigma0_param: sp.clone(), flows: vec![], adjust: true };
    let n = 100_000;
    let mean: f64 = (0..n)
        .map(|_| {
            let e = standard_normal(d, &mut r);
            flow_elbo_terms(&chain, &e, PriorConfig::new(lambda).unwrap()).unwrap().kl_estimate()
        })
        .sum::<f64>()
        / n as f64;
    let exact = meanfield_kl(&mu0, &sp, lambda);
    assert!((mean - exact).abs() <= 0.01 * exact, "{mean} vs {exact}");
}

/// Inverts `y = z + u tanh(wᵀz + b)` by bisection on `a = wᵀz`, which solves
/// `wᵀy = a + uᵀw tanh(a + b)` (monotone when `uᵀw >= -1`).
fn invert(f: &PlanarFlowParams, y: &[f64]) -> Vec<f64> {
    let uw: f64 = f.u.iter().zip(&f.w).map(|(a, b)| a * b).sum();
    let wy: f64 = f.w.iter().zip(y).map(|(a, b)| a * b).sum();
    let (mut lo, mut hi) = (wy - uw.abs() - 1.0, wy + uw.abs() + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid + uw * (mid + f.b).tanh() < wy {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = (0.5 * (lo + hi) + f.b).tanh();
    y.iter().zip(&f.u).map(|(yi, ui)| yi - ui * t).collect()
}

#[test]
fn single_flow_density_matches_change_of_variables() {
    let mut r = rng(6);
    let raw = PlanarFlowParams { u: vec![2.0, 0.5], w: vec![1.5, -1.0], b: 0.3 };
    let f = raw.adjusted().unwrap();
    let chain = FlowChain { mu0: vec![0.0; 2], sigma0_param: vec![softplus_inv(1.0); 2], flows: vec![raw], adjust: true };
    let prior = PriorConfig::new(1.0).unwrap();
    let (lo, hi, cells) = (-5.0, 5.0, 20usize);
    let width = (hi - lo) / cells as f64;
    let n = 100_000;
    let mut hist = vec![0.0; cells * cells + 1];
    for _ in 0..n {
        let z = flow_elbo_terms(&chain, &standard_normal(2, &mut r), prior).unwrap().z_k;
        let (i, j) = (((z[0] - lo) / width).floor(), ((z[1] - lo) / width).floor());
        let slot = if (0.0..cells as f64).contains(&i) && (0.0..cells as f64).contains(&j) {
            i as usize * cells + j as usize
        } else {
            cells * cells
        };
        hist[slot] += 1.0 / n as f64;
    }
    // Cell masses of the change-of-variables density by a 6x6 midpoint rule.
    let density = |y: &[f64]| {
        let z = invert(&f, y);
        let (_, ld) = flow_forward(&f, &z).unwrap();
        let log_q0 = -0.5 * (z[0] * z[0] + z[1] * z[1]) - (2.0 * std::f64::consts::PI).ln();
        (log_q0 - ld).exp()
    };
    let sub = 6;
    let h = width / sub as f64;
    let mut exact = vec![0.0; cells * cells + 1];
    for i in 0..cells {
        for j in 0..cells {
            let mut m = 0.0;
            for a in 0..sub {
                for b in 0..sub {
                    let y = [lo + i as f64 * width + (a as f64 + 0.5) * h, lo + j as f64 * width + (b as f64 + 0.5) * h];
                    m += density(&y) * h * h;
                }
            }
            exact[i * cells + j] = m;
        }
    }
    exact[cells * cells] = (1.0 - exact.iter().sum::<f64>()).max(0.0);
    let tv = 0.5 * hist.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(tv < 0.05, "total variation {tv}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn adjusted_flows_stay_invertible(seed in any::<u64>(), k in 0usize..4) {
        let d = [1, 2, 3, 8][k];
        let mut r = rng(seed);
        let scale = r.random_range(0.01..20.0);
        let mut f = random_flow(d, &mut r);
        f.u.iter_mut().for_each(|x| *x *= scale);
        f.w.iter_mut().for_each(|x| *x *= r.random_range(0.1..5.0));
        let f = f.adjusted().unwrap();
        let uw: f64 = f.u.iter().zip(&f.w).map(|(a, b)| a * b).sum();
        prop_assert!(uw >= -1.0 - 1e-12);
        let z: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let t = (f.w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + f.b).tanh();
        prop_assert!(1.0 + uw * (1.0 - t * t) > 0.0);
        let (_, ld) = flow_forward(&f, &z).unwrap();
        prop_assert!(ld.is_finite());
    }
}

#[test]
fn flow_posterior_elbo_gradient() {
    let mut r = rng(7);
    let mut cfg = NetworkConfig::regression(3, 4, 0, Activation::Identity);
    let mut flow = LayerSpec::new(LayerKind::WhviFlow, 3, 4, Activation::Tanh);
    flow.n_flows = 2;
    cfg.layers = vec![flow, LayerSpec::new(LayerKind::Deterministic, 4, 1, Activation::Identity)];
    for point in 0..20 {
        let model = Model::init(cfg.clone(), &mut r).unwrap();
        let mut params = model.params.clone();
        for (name, v) in params.iter_mut() {
            if name.ends_with("sigma_param") {
                v.iter_mut().for_each(|p| *p = softplus_inv(r.random_range(0.1..0.6)));
            } else if name.contains(".flow") {
                v.iter_mut().for_each(|p| *p = r.random_range(-0.8..0.8));
            }
        }
        let x: Vec<f64> = (0..15).map(|_| r.random_range(-1.0..1.0)).collect();
        let data = Data::new(x, 3, Targets::Real(standard_normal(5, &mut r))).unwrap();
        let noise = NoiseBundle::draw(&cfg, 5, 2, &mut r);
        let lay = layout(&params);
        let err = finite_diff_check(
            |t, leaf| {
                let vars = unflatten(t, leaf, &lay)?;
                Ok(elbo_graph(t, &cfg, &vars, &data, 30, &noise)?.0)
            },
            &flatten(&params),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "point {point}: {err}");
    }
}
