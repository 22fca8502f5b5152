mod common;

use common::{grad_errors, rng, uniform, EPS};
use reid_adapt::graph::grad_check;
use reid_adapt::Graph;

#[test]
fn every_op_and_objective_matches_finite_differences() {
    for (name, err) in grad_errors(20) {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn sum_of_squares_is_tight() {
    for seed in 0..5 {
        let x = uniform(&mut rng(seed), &[4, 3], -2.0, 2.0);
        let err = grad_check(
            |g, v| {
                let s = g.square(v)?;
                g.sum(s)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err:e}");
    }
}

#[test]
fn linear_functions_are_exact_up_to_rounding() {
    let x = uniform(&mut rng(7), &[2, 5], -1.0, 1.0);
    let err = grad_check(
        |g, v| {
            let y = g.scale(v, 3.0)?;
            g.sum(y)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn shared_input_gradient_is_sum_of_branches() {
    let x = uniform(&mut rng(3), &[2, 2], -1.0, 1.0);
    let run = |branches: &[bool; 2]| {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(x.clone().with_grad());
        let mut total = None;
        if branches[0] {
            let s = g.square(v).unwrap();
            total = Some(g.sum(s).unwrap());
        }
        if branches[1] {
            let s = g.sigmoid(v).unwrap();
            let s = g.sum(s).unwrap();
            total = Some(match total {
                Some(t) => g.add(t, s).unwrap(),
                None => s,
            });
        }
        g.backward(total.unwrap()).unwrap();
        g.grad(v).unwrap().to_vec()
    };
    let both = run(&[true, true]);
    let a = run(&[true, false]);
    let b = run(&[false, true]);
    for i in 0..4 {
        assert!((both[i] - (a[i] + b[i])).abs() < 1e-15);
    }
}

#[test]
fn repeated_forward_is_bit_identical() {
    let x = uniform(&mut rng(11), &[3, 4], -1.0, 1.0);
    let w = uniform(&mut rng(12), &[4, 2], -1.0, 1.0);
    let run = || {
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(x.clone()), g.constant(w.clone()));
        let p = g.matmul(a, b).unwrap();
        let s = g.softplus(p).unwrap();
        g.value(s).data().to_vec()
    };
    assert_eq!(run(), run());
}
