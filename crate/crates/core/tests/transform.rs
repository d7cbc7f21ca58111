use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use whvi::transform::{fastfood_sample, fwht, fwht_batch, hadamard_dense, FastfoodFactors};
use whvi::whvi::standard_normal;

/// Entry (i, j) of the unnormalized Sylvester matrix is (-1)^popcount(i & j).
fn sylvester(d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 })
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn dense_constructor_matches_bit_formula() {
    for k in 0..=7 {
        let d = 1 << k;
        assert_eq!(hadamard_dense(d).unwrap(), sylvester(d));
    }
    let h4 = hadamard_dense(4).unwrap();
    assert_eq!(&h4 * h4.transpose(), DMatrix::identity(4, 4) * 4.0);
}

#[test]
fn transform_matches_dense_product_up_to_1024() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 1..=10 {
        let d = 1 << k;
        let h = sylvester(d);
        let scale = 1.0 / (d as f64).sqrt();
        for _ in 0..20 {
            let v = standard_normal(d, &mut rng);
            let want = &h * DVector::from_column_slice(&v);
            assert!(max_abs(&fwht(&v, false).unwrap(), want.as_slice()) <= 1e-10);
            let want_n: Vec<f64> = want.iter().map(|x| x * scale).collect();
            assert!(max_abs(&fwht(&v, true).unwrap(), &want_n) <= 1e-10);
        }
    }
}

#[test]
fn batch_matches_row_by_row_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = DMatrix::from_row_slice(8, 16, &standard_normal(128, &mut rng));
    let out = fwht_batch(&x, false).unwrap();
    let want = &x * sylvester(16).transpose();
    assert!((out - want).amax() <= 1e-10);
}

#[test]
fn fastfood_algebraic_identity() {
    // s = 1/sqrt(D) with the identity permutation and unit g, b gives
    // (1/sqrt(D)) H H = sqrt(D) I.
    let d = 16;
    let f = FastfoodFactors {
        s: vec![1.0 / (d as f64).sqrt(); d],
        g: vec![1.0; d],
        b: vec![1.0; d],
        perm: (0..d).collect(),
    };
    let m = f.to_matrix().unwrap();
    assert!((m - DMatrix::identity(d, d) * (d as f64).sqrt()).amax() < 1e-12);
}

#[test]
fn fastfood_entry_moments() {
    let d = 256;
    let n = 10_000;
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..16u64)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + c);
            let mut s = vec![0.0; d * d];
            let mut s2 = vec![0.0; d * d];
            for _ in 0..n / 16 {
                let m = fastfood_sample(d, &mut rng).unwrap();
                for (i, x) in m.iter().enumerate() {
                    s[i] += x;
                    s2[i] += x * x;
                }
            }
            (s, s2)
        })
        .collect();
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for i in 0..d * d {
        let s: f64 = chunks.iter().map(|c| c.0[i]).sum();
        let s2: f64 = chunks.iter().map(|c| c.1[i]).sum();
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    assert!(worst_mean <= 0.05, "worst entry mean {worst_mean}");
    assert!(worst_var <= 0.1, "worst entry variance deviation {worst_var}");
}

fn pow2_vec() -> impl Strategy<Value = Vec<f64>> {
    (0u32..=10).prop_flat_map(|k| prop::collection::vec(-10.0f64..10.0, 1usize << k))
}

proptest! {
    #[test]
    fn normalized_transform_is_an_involution(v in pow2_vec()) {
        let back = fwht(&fwht(&v, true).unwrap(), true).unwrap();
        prop_assert!(max_abs(&back, &v) <= 1e-10);
    }

    #[test]
    fn transform_is_linear(
        pair in (0u32..=9).prop_flat_map(|k| {
            let n = 1usize << k;
            (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-5.0f64..5.0, n))
        }),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let (x, y) = pair;
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = fwht(&mix, false).unwrap();
        let fx = fwht(&x, false).unwrap();
        let fy = fwht(&y, false).unwrap();
        let rhs: Vec<f64> = fx.iter().zip(&fy).map(|(p, q)| a * p + b * q).collect();
        let scale = rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(max_abs(&lhs, &rhs) <= 1e-12 * scale);
    }

    #[test]
    fn non_powers_of_two_are_rejected(n in 3usize..2000) {
        prop_assume!(!n.is_power_of_two());
        prop_assert!(fwht(&vec![0.0; n], false).is_err());
    }
}
