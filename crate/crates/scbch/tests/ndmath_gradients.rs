//! Per-primitive gradient checks: every tape op against central finite
//! differences on random inputs in [-2, 2], keeping clear of the
//! relu/abs/clamp kinks.

mod common;

use common::{fd_max_rel_error, rand_matrix, seeded};
use scbch::ndmath::{Matrix, Tape, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Checks one op whose scalar output is `sum(op(leaves))`.
fn check(name: &str, leaves: &[Matrix], build: impl Fn(&[Var]) -> Var) {
    let tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&vars);
    let grads = out.backward().unwrap();
    let grad_mats: Vec<Matrix> = vars.iter().map(|v| grads.get(v)).collect();
    let worst = fd_max_rel_error(leaves, &grad_mats, STEP, |mats| {
        let tape = Tape::new();
        let vars: Vec<Var> = mats.iter().map(|m| tape.leaf(m.clone())).collect();
        build(&vars).scalar().unwrap()
    });
    assert!(worst < TOL, "{name}: max relative error {worst}");
}

/// Random matrix in [-2, 2] with entries kept at least `margin` away
/// from the given kink points.
fn rand_away_from(
    rng: &mut rand_chacha::ChaCha8Rng,
    rows: usize,
    cols: usize,
    kinks: &[f64],
    margin: f64,
) -> Matrix {
    let mut m = rand_matrix(rng, rows, cols, -2.0, 2.0);
    for v in m.as_mut_slice() {
        while kinks.iter().any(|k| (*v - k).abs() < margin) {
            *v += 3.0 * margin;
        }
    }
    m
}

#[test]
fn matmul_gradient() {
    let mut rng = seeded(1);
    let a = rand_matrix(&mut rng, 3, 4, -2.0, 2.0);
    let b = rand_matrix(&mut rng, 4, 2, -2.0, 2.0);
    check("matmul", &[a, b], |v| {
        v[0].matmul(&v[1]).unwrap().sum().unwrap()
    });
}

#[test]
fn transpose_gradient() {
    let mut rng = seeded(2);
    let a = rand_matrix(&mut rng, 3, 5, -2.0, 2.0);
    let b = rand_matrix(&mut rng, 5, 3, -2.0, 2.0);
    check("transpose", &[a, b], |v| {
        v[0].transpose().mul(&v[1]).unwrap().sum().unwrap()
    });
}

#[test]
fn elementwise_binary_gradients() {
    let mut rng = seeded(3);
    for (name, f) in [
        ("add", (|a: &Var, b: &Var| a.add(b).unwrap()) as fn(&Var, &Var) -> Var),
        ("sub", |a, b| a.sub(b).unwrap()),
        ("mul", |a, b| a.mul(b).unwrap()),
    ] {
        let a = rand_matrix(&mut rng, 4, 3, -2.0, 2.0);
        let b = rand_matrix(&mut rng, 4, 3, -2.0, 2.0);
        check(name, &[a, b], |v| {
            // Squaring makes the sub gradient nontrivial.
            let r = f(&v[0], &v[1]);
            r.mul(&r).unwrap().sum().unwrap()
        });
    }
}

#[test]
fn scalar_op_gradients() {
    let mut rng = seeded(4);
    let a = rand_matrix(&mut rng, 4, 3, -2.0, 2.0);
    check("add_scalar", std::slice::from_ref(&a), |v| {
        let r = v[0].add_scalar(0.7);
        r.mul(&r).unwrap().sum().unwrap()
    });
    check("mul_scalar", &[a], |v| {
        let r = v[0].mul_scalar(-1.3);
        r.mul(&r).unwrap().sum().unwrap()
    });
}

#[test]
fn row_broadcast_gradient() {
    let mut rng = seeded(5);
    let a = rand_matrix(&mut rng, 4, 3, -2.0, 2.0);
    let row = rand_matrix(&mut rng, 1, 3, -2.0, 2.0);
    check("add_row_broadcast", &[a, row], |v| {
        let r = v[0].add_row_broadcast(&v[1]).unwrap();
        r.mul(&r).unwrap().sum().unwrap()
    });
}

#[test]
fn smooth_unary_gradients() {
    let mut rng = seeded(6);
    for (name, f) in [
        ("tanh", (|v: &Var| v.tanh()) as fn(&Var) -> Var),
        ("sigmoid", |v| v.sigmoid()),
        ("exp", |v| v.exp()),
    ] {
        let a = rand_matrix(&mut rng, 4, 3, -2.0, 2.0);
        check(name, &[a], |v| f(&v[0]).sum().unwrap());
    }
}

#[test]
fn ln_gradient_on_positive_inputs() {
    let mut rng = seeded(7);
    let a = rand_matrix(&mut rng, 4, 3, 0.1, 2.0);
    check("ln", &[a], |v| v[0].ln().sum().unwrap());
}

#[test]
fn kinked_unary_gradients_away_from_kinks() {
    let mut rng = seeded(8);
    let a = rand_away_from(&mut rng, 4, 3, &[0.0], 1e-3);
    check("relu", std::slice::from_ref(&a), |v| v[0].relu().sum().unwrap());
    check("abs", &[a], |v| v[0].abs().sum().unwrap());

    let c = rand_away_from(&mut rng, 4, 3, &[-0.5, 0.5], 1e-3);
    check("clamp", &[c], |v| {
        let r = v[0].clamp(-0.5, 0.5);
        r.mul(&r).unwrap().sum().unwrap()
    });
}

#[test]
fn reduce_gradients() {
    let mut rng = seeded(9);
    for (name, f) in [
        ("sum", (|v: &Var| v.sum().unwrap()) as fn(&Var) -> Var),
        ("mean", |v| v.mean().unwrap()),
    ] {
        let a = rand_matrix(&mut rng, 4, 3, -2.0, 2.0);
        check(name, &[a], |v| {
            let r = f(&v[0]);
            r.mul(&r).unwrap().sum().unwrap()
        });
    }
    for (name, f) in [
        ("row_sum", (|v: &Var| v.row_sum().unwrap()) as fn(&Var) -> Var),
        ("row_mean", |v| v.row_mean().unwrap()),
    ] {
        let a = rand_matrix(&mut rng, 4, 3, -2.0, 2.0);
        check(name, &[a], |v| {
            let r = f(&v[0]);
            r.mul(&r).unwrap().sum().unwrap()
        });
    }
}
