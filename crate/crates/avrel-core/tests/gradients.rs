//! Central finite-difference checks for every op in the catalog.
//!
//! Each op is wrapped into a scalar by weighting its output with a fixed
//! random tensor, so the whole Jacobian is exercised, not just the row sums.

use avrel_core::tensor::{attention, concat, embedding_lookup, grad_check, positional_encoding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Box-Muller keeps us off the relu kink with probability 1.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-10..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
}

/// Reduce `t` to a scalar with a fixed weighting so every output coordinate
/// contributes a distinct gradient path.
fn weigh(t: &Tensor, w: &[f64]) -> Tensor {
    let wt = Tensor::new(t.shape(), w.to_vec());
    t.hadamard(&wt).sum_all()
}

#[test]
fn grad_add_same_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::param(&[3, 4], randn(&mut rng, 12));
    let y = Tensor::new(&[3, 4], randn(&mut rng, 12));
    let w = weights(&mut rng, 12);
    let err = grad_check(|x| weigh(&x.add(&y), &w), &x, EPS).unwrap();
    assert!(err < TOL, "err={err}");
}

#[test]
fn grad_add_row_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(&[3, 4], randn(&mut rng, 12));
    let b = Tensor::param(&[4], randn(&mut rng, 4));
    let w = weights(&mut rng, 12);
    let err = grad_check(|b| weigh(&x.add(b), &w), &b, EPS).unwrap();
    assert!(err < TOL, "err={err}");
}

#[test]
fn grad_hadamard() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::param(&[2, 5], randn(&mut rng, 10));
    let y = Tensor::new(&[2, 5], randn(&mut rng, 10));
    let w = weights(&mut rng, 10);
    let err = grad_check(|x| weigh(&x.hadamard(&y), &w), &x, EPS).unwrap();
    assert!(err < TOL, "err={err}");
}

#[test]
fn grad_matmul_both_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::param(&[3, 4], randn(&mut rng, 12));
    let b = Tensor::param(&[4, 2], randn(&mut rng, 8));
    let w = weights(&mut rng, 6);
    let b2 = b.clone();
    let err = grad_check(|a| weigh(&a.matmul(&b2), &w), &a, EPS).unwrap();
    assert!(err < TOL, "lhs err={err}");
    let a2 = a.clone();
    let err = grad_check(|b| weigh(&a2.matmul(b), &w), &b, EPS).unwrap();
    assert!(err < TOL, "rhs err={err}");
}

#[test]
fn grad_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::param(&[3, 5], randn(&mut rng, 15));
    let w = weights(&mut rng, 15);
    let err = grad_check(|x| weigh(&x.transpose(), &w), &x, EPS).unwrap();
    assert!(err < TOL, "err={err}");
}

#[test]
fn grad_concat_and_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::param(&[2, 3], randn(&mut rng, 6));
    let y = Tensor::param(&[2, 3], randn(&mut rng, 6));
    let w0 = weights(&mut rng, 12);
    let y2 = y.clone();
    let err = grad_check(|x| weigh(&concat(&[x.clone(), y2.clone()], 0), &w0), &x, EPS).unwrap();
    assert!(err < TOL, "concat axis0 err={err}");
    let x2 = x.clone();
    let err = grad_check(|y| weigh(&concat(&[x2.clone(), y.clone()], 1), &w0), &y, EPS).unwrap();
    assert!(err < TOL, "concat axis1 err={err}");
    let w1 = weights(&mut rng, 4);
    let err = grad_check(|x| weigh(&x.slice(1, 1, 2), &w1), &x, EPS).unwrap();
    assert!(err < TOL, "slice err={err}");
}

#[test]
fn grad_conv1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::param(&[8, 3], randn(&mut rng, 24));
    let wt = Tensor::param(&[4, 3, 3], randn(&mut rng, 36));
    let b = Tensor::param(&[4], randn(&mut rng, 4));
    // stride 1 with same padding: output [8, 4]
    let w = weights(&mut rng, 32);
    let (wt2, b2) = (wt.clone(), b.clone());
    let err = grad_check(|x| weigh(&x.conv1d(&wt2, Some(&b2), 1, 1), &w), &x, EPS).unwrap();
    assert!(err < TOL, "input err={err}");
    let (x2, b3) = (x.clone(), b.clone());
    let err = grad_check(|wt| weigh(&x2.conv1d(wt, Some(&b3), 1, 1), &w), &wt, EPS).unwrap();
    assert!(err < TOL, "weight err={err}");
    let (x3, wt3) = (x.clone(), wt.clone());
    let err = grad_check(|b| weigh(&x3.conv1d(&wt3, Some(b), 1, 1), &w), &b, EPS).unwrap();
    assert!(err < TOL, "bias err={err}");
    // strided, no padding: output [(8-2)/2+1, 4] = [4, 4]
    let ws = weights(&mut rng, 16);
    let wt4 = Tensor::param(&[4, 3, 2], randn(&mut rng, 24));
    let err = grad_check(|x| weigh(&x.conv1d(&wt4, None, 2, 0), &ws), &x, EPS).unwrap();
    assert!(err < TOL, "strided err={err}");
}

#[test]
fn grad_dwconv1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::param(&[7, 4], randn(&mut rng, 28));
    let wt = Tensor::param(&[4, 5], randn(&mut rng, 20));
    let w = weights(&mut rng, 28);
    let wt2 = wt.clone();
    let err = grad_check(|x| weigh(&x.dwconv1d(&wt2), &w), &x, EPS).unwrap();
    assert!(err < TOL, "input err={err}");
    let x2 = x.clone();
    let err = grad_check(|wt| weigh(&x2.dwconv1d(wt), &w), &wt, EPS).unwrap();
    assert!(err < TOL, "weight err={err}");
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::param(&[2, 2, 5, 5], randn(&mut rng, 100));
    let wt = Tensor::param(&[3, 2, 3, 3], randn(&mut rng, 54));
    let b = Tensor::param(&[3], randn(&mut rng, 3));
    // stride 2, padding 1: output [2, 3, 3, 3]
    let w = weights(&mut rng, 54);
    let (wt2, b2) = (wt.clone(), b.clone());
    let err = grad_check(|x| weigh(&x.conv2d(&wt2, Some(&b2), 2, 1), &w), &x, EPS).unwrap();
    assert!(err < TOL, "input err={err}");
    let (x2, b3) = (x.clone(), b.clone());
    let err = grad_check(|wt| weigh(&x2.conv2d(wt, Some(&b3), 2, 1), &w), &wt, EPS).unwrap();
    assert!(err < TOL, "weight err={err}");
}

#[test]
fn grad_mean_spatial() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Tensor::param(&[2, 3, 4, 4], randn(&mut rng, 96));
    let w = weights(&mut rng, 6);
    let err = grad_check(|x| weigh(&x.mean_spatial(), &w), &x, EPS).unwrap();
    assert!(err < TOL, "err={err}");
}

#[test]
fn grad_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::param(&[3, 4], randn(&mut rng, 12));
    let w = weights(&mut rng, 12);
    for (name, f) in [
        ("sigmoid", Box::new(|x: &Tensor| x.sigmoid()) as Box<dyn Fn(&Tensor) -> Tensor>),
        ("relu", Box::new(|x: &Tensor| x.relu())),
        ("swish", Box::new(|x: &Tensor| x.swish())),
    ] {
        let err = grad_check(|x| weigh(&f(x), &w), &x, EPS).unwrap();
        assert!(err < TOL, "{name} err={err}");
    }
    // log on strictly positive inputs
    let xp = Tensor::param(&[3, 4], (0..12).map(|i| 0.5 + 0.3 * i as f64).collect());
    let err = grad_check(|x| weigh(&x.log(), &w), &xp, EPS).unwrap();
    assert!(err < TOL, "log err={err}");
}

#[test]
fn grad_softmax_and_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::param(&[3, 5], randn(&mut rng, 15));
    let w = weights(&mut rng, 15);
    let err = grad_check(|x| weigh(&x.softmax(), &w), &x, EPS).unwrap();
    assert!(err < TOL, "softmax err={err}");
    let err = grad_check(|x| weigh(&x.log_softmax(), &w), &x, EPS).unwrap();
    assert!(err < TOL, "log_softmax err={err}");
}

#[test]
fn grad_layer_norm_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::param(&[4, 6], randn(&mut rng, 24));
    let gamma = Tensor::param(&[6], weights(&mut rng, 6));
    let beta = Tensor::param(&[6], randn(&mut rng, 6));
    let w = weights(&mut rng, 24);
    let (g2, b2) = (gamma.clone(), beta.clone());
    let err = grad_check(|x| weigh(&x.layer_norm(&g2, &b2, 1e-9), &w), &x, EPS).unwrap();
    assert!(err < TOL, "input err={err}");
    let (x2, b3) = (x.clone(), beta.clone());
    let err = grad_check(|g| weigh(&x2.layer_norm(g, &b3, 1e-9), &w), &gamma, EPS).unwrap();
    assert!(err < TOL, "gamma err={err}");
    let (x3, g3) = (x.clone(), gamma.clone());
    let err = grad_check(|b| weigh(&x3.layer_norm(&g3, b, 1e-9), &w), &beta, EPS).unwrap();
    assert!(err < TOL, "beta err={err}");
}

#[test]
fn grad_batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::param(&[6, 3], randn(&mut rng, 18));
    let gamma = Tensor::param(&[3], weights(&mut rng, 3));
    let beta = Tensor::param(&[3], randn(&mut rng, 3));
    let w = weights(&mut rng, 18);
    let (g2, b2) = (gamma.clone(), beta.clone());
    let err = grad_check(|x| weigh(&x.batch_norm_train(&g2, &b2, 1e-5).0, &w), &x, EPS).unwrap();
    assert!(err < TOL, "train input err={err}");
    let (x2, b3) = (x.clone(), beta.clone());
    let err = grad_check(|g| weigh(&x2.batch_norm_train(g, &b3, 1e-5).0, &w), &gamma, EPS).unwrap();
    assert!(err < TOL, "train gamma err={err}");
    let mean = vec![0.1, -0.2, 0.3];
    let var = vec![1.1, 0.9, 1.3];
    let (g3, b4) = (gamma.clone(), beta.clone());
    let err = grad_check(|x| weigh(&x.batch_norm_eval(&g3, &b4, &mean, &var, 1e-5), &w), &x, EPS).unwrap();
    assert!(err < TOL, "eval input err={err}");
}

#[test]
fn grad_embedding_lookup() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let table = Tensor::param(&[5, 3], randn(&mut rng, 15));
    let idx = [0usize, 2, 2, 4, 1];
    let w = weights(&mut rng, 15);
    let err = grad_check(|t| weigh(&embedding_lookup(t, &idx), &w), &table, EPS).unwrap();
    assert!(err < TOL, "err={err}");
}

#[test]
fn grad_cross_entropy_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = Tensor::param(&[4, 5], randn(&mut rng, 20));
    let targets = [1usize, 0, 4, 2];
    let err = grad_check(|x| x.cross_entropy_mean(&targets), &x, EPS).unwrap();
    assert!(err < TOL, "err={err}");
}

#[test]
fn grad_attention_q_k_v() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let q = Tensor::param(&[3, 4], randn(&mut rng, 12));
    let k = Tensor::param(&[5, 4], randn(&mut rng, 20));
    let v = Tensor::param(&[5, 4], randn(&mut rng, 20));
    let bias = Tensor::new(&[3, 5], randn(&mut rng, 15));
    let w = weights(&mut rng, 12);
    let (k2, v2, bi2) = (k.clone(), v.clone(), bias.clone());
    let err = grad_check(|q| weigh(&attention(q, &k2, &v2, 2, Some(&bi2)), &w), &q, EPS).unwrap();
    assert!(err < TOL, "q err={err}");
    let (q2, v3, bi3) = (q.clone(), v.clone(), bias.clone());
    let err = grad_check(|k| weigh(&attention(&q2, k, &v3, 2, Some(&bi3)), &w), &k, EPS).unwrap();
    assert!(err < TOL, "k err={err}");
    let (q3, k3, bi4) = (q.clone(), k.clone(), bias.clone());
    let err = grad_check(|v| weigh(&attention(&q3, &k3, v, 2, Some(&bi4)), &w), &v, EPS).unwrap();
    assert!(err < TOL, "v err={err}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..20 {
        let x = Tensor::new(&[4, 7], randn(&mut rng, 28));
        let y = x.softmax().data();
        for r in 0..4 {
            let row = &y[r * 7..(r + 1) * 7];
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn layer_norm_normalizes_before_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let c = 32;
    let x = Tensor::new(&[5, c], randn(&mut rng, 5 * c));
    let gamma = Tensor::new(&[c], vec![1.0; c]);
    let beta = Tensor::new(&[c], vec![0.0; c]);
    let y = x.layer_norm(&gamma, &beta, 1e-9).data();
    for r in 0..5 {
        let row = &y[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        assert!(mean.abs() < 1e-7, "mean={mean}");
        assert!((var - 1.0).abs() < 1e-6, "var={var}");
    }
}

#[test]
fn concat_then_slice_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let a = Tensor::new(&[3, 4], randn(&mut rng, 12));
    let b = Tensor::new(&[2, 4], randn(&mut rng, 8));
    let cat = concat(&[a.clone(), b.clone()], 0);
    assert_eq!(cat.slice(0, 0, 3).data(), a.data());
    assert_eq!(cat.slice(0, 3, 2).data(), b.data());
}

#[test]
fn positional_encoding_is_bounded_and_deterministic() {
    let p1 = positional_encoding(10, 8);
    let p2 = positional_encoding(10, 8);
    assert_eq!(p1.data(), p2.data());
    assert!(p1.data().iter().all(|v| v.abs() <= 1.0));
}
