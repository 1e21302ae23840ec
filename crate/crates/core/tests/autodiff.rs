mod common;

use std::sync::Arc;

use mole::autodiff::{grad_check, Tape, Var};
use mole::error::Result;
use mole::sparse::CsrMatrix;
use mole::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

/// Values with |v| in [0.1, 2], away from kinks at 0.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = common::rng(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(0.1..2.0);
            if r.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values, so max-pooling has a unique winner per window.
fn distinct(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut r = common::rng(seed);
    let perm = mole::rng::permutation(n, &mut r);
    let data = perm.iter().map(|&p| p as f64 * 0.1 - n as f64 * 0.05).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any tensor to a scalar with fixed random weights, so every output
/// coordinate contributes with its own coefficient.
fn weigh<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = common::gaussian(&y.shape(), &mut common::rng(seed ^ 0xABCD));
    y.mul(y.tape().constant_owned(w))?.sum()
}

fn check(f: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>, x: &Tensor) -> std::result::Result<(), TestCaseError> {
    let err = grad_check(f, x, EPS).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(err <= TOL, "relative error {err}");
    Ok(())
}

fn dims() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..5, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn elementwise_unary((r, c, s) in dims()) {
        let x = away_from_zero(&[r, c], s);
        check(|v| weigh(v.relu()?, s), &x)?;
        check(|v| weigh(v.sigmoid()?, s), &x)?;
        check(|v| weigh(v.tanh()?, s), &x)?;
        check(|v| weigh(v.exp()?, s), &x)?;
        check(|v| weigh(v.mul(v)?.ln()?, s), &x)?;
        check(|v| weigh(v.scale(-1.7)?, s), &x)?;
    }

    #[test]
    fn binary_and_broadcast((r, c, s) in dims()) {
        let x = away_from_zero(&[r, c], s);
        let other = away_from_zero(&[r, c], s.wrapping_add(1));
        let row = away_from_zero(&[c], s.wrapping_add(2));
        check(|v| { let o = v.tape().constant(&other); weigh(v.add(o)?, s) }, &x)?;
        check(|v| { let o = v.tape().constant(&other); weigh(v.sub(o)?, s) }, &x)?;
        check(|v| { let o = v.tape().constant(&other); weigh(v.mul(o)?, s) }, &x)?;
        check(|v| { let o = v.tape().constant(&other); weigh(v.div(o)?, s) }, &x)?;
        check(|v| { let o = v.tape().constant(&other); weigh(o.div(v)?, s) }, &x)?;
        // the broadcast operand itself
        check(|b| { let o = b.tape().constant(&x); weigh(o.add(b)?, s) }, &row)?;
        check(|b| { let o = b.tape().constant(&x); weigh(o.mul(b)?, s) }, &row)?;
    }

    #[test]
    fn matmul_both_sides((r, c, s) in dims(), k in 1usize..5) {
        let a = away_from_zero(&[r, c], s);
        let b = away_from_zero(&[c, k], s.wrapping_add(3));
        check(|v| { let o = v.tape().constant(&b); weigh(v.matmul(o)?, s) }, &a)?;
        check(|v| { let o = v.tape().constant(&a); weigh(o.matmul(v)?, s) }, &b)?;
        check(|v| weigh(v.transpose()?, s), &a)?;
    }

    #[test]
    fn shape_ops((r, c, s) in dims()) {
        let x = away_from_zero(&[r, c, 2], s);
        check(|v| weigh(v.reshape(&[c, r * 2])?, s), &x)?;
        check(|v| weigh(v.permute(&[2, 0, 1])?, s), &x)?;
        check(|v| weigh(v.flatten_rows()?, s), &x)?;
        check(|v| weigh(v.sum_axis(1)?, s), &x)?;
        check(|v| weigh(v.mean_axis(2)?, s), &x)?;
        check(|v| v.mean(), &x)?;
        check(|v| weigh(v.slice(1, 0, c.div_ceil(2))?, s), &x)?;
        check(|v| weigh(Var::concat(&[v, v.scale(2.0)?], 0)?, s), &x)?;
        check(|v| weigh(Var::concat(&[v.scale(0.5)?, v], 2)?, s), &x)?;
    }

    #[test]
    fn softmax_axes((r, c, s) in dims()) {
        let x = away_from_zero(&[r, c], s);
        check(|v| weigh(v.softmax(1)?, s), &x)?;
        check(|v| weigh(v.softmax(0)?, s), &x)?;
    }

    #[test]
    fn gather_rows((r, c, s) in dims(), picks in proptest::collection::vec(0usize..16, 1..8)) {
        let x = away_from_zero(&[r, c], s);
        let idx: Vec<usize> = picks.iter().map(|p| p % r).collect();
        check(|v| weigh(v.gather(&idx)?, s), &x)?;
    }

    #[test]
    fn sparse_left_product((r, c, s) in dims(), entries in proptest::collection::vec((0usize..5, 0usize..5, -2.0f64..2.0), 0..10)) {
        let x = away_from_zero(&[r, c], s);
        let trip: Vec<(usize, usize, f64)> = entries.iter().map(|&(i, j, w)| (i % 3, j % r, w)).collect();
        let m = Arc::new(CsrMatrix::from_triplets(3, r, &trip).unwrap());
        check(|v| weigh(v.sparse_left_mul(&m)?, s), &x)?;
    }

    #[test]
    fn conv_and_pool(c_in in 1usize..3, c_out in 1usize..3, hw in 3usize..6, k in 1usize..4, stride in 1usize..3, pad in 0usize..2, s in any::<u64>()) {
        prop_assume!(hw + 2 * pad >= k);
        let x = away_from_zero(&[2, c_in, hw, hw], s);
        let kern = away_from_zero(&[c_out, c_in, k, k], s.wrapping_add(5));
        let bias = away_from_zero(&[c_out], s.wrapping_add(6));
        check(|v| { let t = v.tape(); weigh(v.conv2d(t.constant(&kern), t.constant(&bias), stride, pad)?, s) }, &x)?;
        check(|w| { let t = w.tape(); weigh(t.constant(&x).conv2d(w, t.constant(&bias), stride, pad)?, s) }, &kern)?;
        check(|b| { let t = b.tape(); weigh(t.constant(&x).conv2d(t.constant(&kern), b, stride, pad)?, s) }, &bias)?;
        let d = distinct(&[2, c_in, hw, hw], s);
        check(|v| weigh(v.maxpool2d(2, stride)?, s), &d)?;
    }

    #[test]
    fn kernel_primitives(n in 2usize..6, d in 1usize..4, s in any::<u64>()) {
        let x = away_from_zero(&[n, d], s);
        check(|v| weigh(v.pairwise_sq_dist()?, s), &x)?;
        // symmetric positive definite argument: x xᵀ + I
        let eye = Tensor::identity(n);
        check(|v| { let i = v.tape().constant(&eye); v.matmul(v.transpose()?)?.add(i)?.trace() }, &x)?;
        check(|v| { let i = v.tape().constant(&eye); v.matmul(v.transpose()?)?.add(i)?.trace_power(1.01) }, &x)?;
        check(|v| { let i = v.tape().constant(&eye); v.matmul(v.transpose()?)?.add(i)?.trace_power(2.0) }, &x)?;
    }
}

#[test]
fn grad_check_examples() {
    let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
    assert!(grad_check(|v| v.sum(), &x, 1e-5).unwrap() <= 1e-9);
    let x = Tensor::vector(vec![0.3, -1.2]);
    assert!(grad_check(|v| v.sigmoid()?.sum(), &x, 1e-5).unwrap() <= 1e-6);
    assert!(grad_check(|v| Ok(v), &x, 1e-5).is_err());
}

#[test]
fn dense_relu_mean_matches_central_differences() {
    let mut r = common::rng(17);
    let x = common::gaussian(&[6, 5], &mut r);
    let w = common::gaussian(&[5, 4], &mut r);
    let b = common::gaussian(&[4], &mut r);
    let err = grad_check(
        |wv| {
            let t = wv.tape();
            t.constant(&x).matmul(wv)?.add(t.constant(&b))?.relu()?.mean()
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn losses_built_from_another_tape_give_no_gradient_to_its_parameters() {
    let upstream = Tape::new(0);
    let downstream = Tape::new(1);
    let w0 = upstream.param(&Tensor::vector(vec![1.0, 2.0]));
    let h = w0.scale(3.0).unwrap();
    let w1 = downstream.param(&Tensor::vector(vec![0.5, 0.5]));
    let loss = w1.mul(h).unwrap().sum().unwrap();
    assert_eq!(loss.tape().owner(), 1);
    let grads = downstream.backward(loss).unwrap();
    assert!(grads.get(w0).is_none());
    assert_eq!(grads.get(w1).unwrap().data(), &[3.0, 6.0]);
    assert_eq!(grads.len(), 1);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut r = common::rng(99);
        let x = common::gaussian(&[8, 3], &mut r);
        let tape = Tape::new(0);
        let v = tape.param(&x);
        let y = v.pairwise_sq_dist().unwrap().scale(-0.5).unwrap().exp().unwrap();
        let loss = y.softmax(1).unwrap().mul(y).unwrap().sum().unwrap();
        let value = loss.item().unwrap();
        let g = tape.backward(loss).unwrap().get(v).unwrap().clone();
        (value.to_bits(), g.data().iter().map(|d| d.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
