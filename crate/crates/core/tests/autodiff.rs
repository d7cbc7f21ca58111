use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use whvi::autodiff::{finite_diff_check, Tape, Var};
use whvi::transform::hadamard_dense;
use whvi::whvi::standard_normal;
use whvi::Result;

const POINTS: usize = 100;
const TOL: f64 = 1e-4;

/// Projects an arbitrary-shape output onto fixed random weights so every
/// output entry contributes to the scalar being differentiated.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out).len();
    let shape = tape.shape(out).to_vec();
    let w = standard_normal(n, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w, &shape)?;
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Runs the finite-difference check for `op` at `POINTS` random inputs of
/// length `n` drawn by `draw`.
fn check_op(
    name: &str,
    n: usize,
    draw: impl Fn(&mut ChaCha8Rng) -> f64,
    op: impl Fn(&mut Tape, Var) -> Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let err = finite_diff_check(
            |t, v| {
                let out = op(t, v)?;
                project(t, out, point as u64)
            },
            &x,
            1e-5,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst <= TOL, "{name}: worst relative error {worst}");
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(rand_distr::StandardNormal)
}

fn positive(r: &mut ChaCha8Rng) -> f64 {
    r.random_range(0.5..3.0)
}

/// Away from the kink at zero, where central differences are undefined.
fn off_kink(r: &mut ChaCha8Rng) -> f64 {
    let m: f64 = r.random_range(0.05..2.0);
    if r.random::<bool>() {
        m
    } else {
        -m
    }
}

fn split(t: &mut Tape, v: Var, at: usize, total: usize) -> Result<(Var, Var)> {
    Ok((t.slice(v, 0, at)?, t.slice(v, at, total - at)?))
}

#[test]
fn elementwise_binary_primitives() {
    check_op("add", 12, normal, |t, v| {
        let (a, b) = split(t, v, 6, 12)?;
        t.add(a, b)
    });
    check_op("sub", 12, normal, |t, v| {
        let (a, b) = split(t, v, 6, 12)?;
        t.sub(a, b)
    });
    check_op("mul", 12, normal, |t, v| {
        let (a, b) = split(t, v, 6, 12)?;
        t.mul(a, b)
    });
    check_op("mul-scalar-broadcast", 7, normal, |t, v| {
        let (a, b) = split(t, v, 6, 7)?;
        t.mul(a, b)
    });
    check_op("mul-row-broadcast", 15, normal, |t, v| {
        let (a, b) = split(t, v, 12, 15)?;
        let a = t.reshape(a, &[4, 3])?;
        t.mul(a, b)
    });
    check_op("add-row-broadcast", 15, normal, |t, v| {
        let (a, b) = split(t, v, 12, 15)?;
        let a = t.reshape(a, &[4, 3])?;
        t.add(a, b)
    });
    check_op("scale", 5, normal, |t, v| Ok(t.scale(v, -1.7)));
    check_op("add_scalar", 5, normal, |t, v| t.add_scalar(v, 0.3));
}

#[test]
fn matrix_primitives() {
    check_op("matmul", 6 + 12, normal, |t, v| {
        let (a, b) = split(t, v, 6, 18)?;
        let a = t.reshape(a, &[2, 3])?;
        let b = t.reshape(b, &[3, 4])?;
        t.matmul(a, b, false)
    });
    check_op("matmul-transposed", 6 + 12, normal, |t, v| {
        let (a, b) = split(t, v, 6, 18)?;
        let a = t.reshape(a, &[2, 3])?;
        let b = t.reshape(b, &[4, 3])?;
        t.matmul(a, b, true)
    });
    check_op("diag_scale", 12 + 4, normal, |t, v| {
        let (a, d) = split(t, v, 12, 16)?;
        let a = t.reshape(a, &[3, 4])?;
        t.diag_scale(a, d)
    });
    check_op("fwht-normalized", 16, normal, |t, v| t.fwht(v, None, true));
    check_op("fwht-blocked", 16, normal, |t, v| {
        let a = t.reshape(v, &[2, 8])?;
        t.fwht(a, Some(4), false)
    });
}

#[test]
fn shape_primitives() {
    check_op("concat", 9, normal, |t, v| {
        let (a, b) = split(t, v, 4, 9)?;
        t.concat(&[b, a, b])
    });
    check_op("slice", 10, normal, |t, v| {
        let a = t.reshape(v, &[2, 5])?;
        t.slice(a, 1, 3)
    });
    check_op("pad", 6, normal, |t, v| {
        let a = t.reshape(v, &[2, 3])?;
        t.pad(a, 8)
    });
    check_op("reshape", 6, normal, |t, v| t.reshape(v, &[3, 2]));
}

#[test]
fn unary_primitives() {
    check_op("relu", 8, off_kink, |t, v| Ok(t.relu(v)));
    check_op("tanh", 8, normal, |t, v| Ok(t.tanh(v)));
    check_op("cos", 8, normal, |t, v| Ok(t.cos(v)));
    check_op("sin", 8, normal, |t, v| Ok(t.sin(v)));
    check_op("exp", 8, normal, |t, v| Ok(t.exp(v)));
    check_op("log", 8, positive, |t, v| Ok(t.log(v)));
    check_op("softplus", 8, normal, |t, v| Ok(t.softplus(v)));
    check_op("sqrt", 8, positive, |t, v| Ok(t.sqrt(v)));
    check_op("recip", 8, positive, |t, v| Ok(t.recip(v)));
    check_op("square", 8, normal, |t, v| Ok(t.square(v)));
}

#[test]
fn reductions_and_losses() {
    check_op("sum", 8, normal, |t, v| Ok(t.sum(v)));
    check_op("mean", 8, normal, |t, v| Ok(t.mean(v)));
    check_op("gaussian_nll-scalar", 7, normal, |t, v| {
        let (p, l) = split(t, v, 6, 7)?;
        t.gaussian_nll(p, l, &[0.5, -1.0, 2.0, 0.0, 0.1, -0.3])
    });
    check_op("gaussian_nll-vector", 8, normal, |t, v| {
        let (p, l) = split(t, v, 4, 8)?;
        t.gaussian_nll(p, l, &[0.5, -1.0, 2.0, 0.0])
    });
    check_op("softmax_cross_entropy", 12, normal, |t, v| {
        let a = t.reshape(v, &[4, 3])?;
        t.softmax_cross_entropy(a, &[0, 2, 1, 2])
    });
}

#[test]
fn fwht_backward_is_dense_transpose() {
    let d = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = standard_normal(d, &mut rng);
    let w = standard_normal(d, &mut rng);
    let mut tape = Tape::new();
    let v = tape.param_vec(&x);
    let y = tape.fwht(v, None, true).unwrap();
    let wc = tape.constant(w.clone(), &[d]).unwrap();
    let p = tape.mul(y, wc).unwrap();
    let loss = tape.sum(p);
    let grad = tape.backward(loss).unwrap().wrt(v, d);
    let h: DMatrix<f64> = hadamard_dense(d).unwrap() / (d as f64).sqrt();
    let want = h.transpose() * nalgebra::DVector::from_vec(w);
    for (a, b) in grad.iter().zip(want.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn repeated_backward_passes_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = standard_normal(16, &mut rng);
    let mut tape = Tape::new();
    let v = tape.param_vec(&x);
    let a = tape.reshape(v, &[4, 4]).unwrap();
    let b = tape.matmul(a, a, true).unwrap();
    let c = tape.tanh(b);
    let l = tape.sum(c);
    let g1 = tape.backward(l).unwrap().wrt(v, 16);
    let g2 = tape.backward(l).unwrap().wrt(v, 16);
    assert_eq!(g1, g2);
}
