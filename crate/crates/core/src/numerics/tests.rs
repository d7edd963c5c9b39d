use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::identity(2));
    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let r = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(r).data(), &[1., 2., 3., 4.]);

    let p = tape.constant(t(&[2, 2], &[1., 0., 0., 0.]));
    let q = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    let r = tape.matmul(p, q).unwrap();
    assert_eq!(tape.value(r).data(), &[5., 6., 0., 0.]);

    let col = tape.constant(t(&[2, 1], &[5., 6.]));
    let r = tape.matmul(m, col).unwrap();
    // 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
    assert_eq!(tape.value(r).shape(), &[2, 1]);
    assert_eq!(tape.value(r).data(), &[17., 39.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0., 0.]));
    let y = tape.softmax_lastdim(x).unwrap();
    assert_close(tape.value(y).data(), &[0.5, 0.5], 1e-15);

    let x = tape.constant(t(&[1], &[42.0]));
    let y = tape.softmax_lastdim(x).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0]);

    let x = tape.constant(t(&[3], &[1., 2., 3.]));
    let y = tape.softmax_lastdim(x).unwrap();
    let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
    let oracle: Vec<f64> = [1f64, 2., 3.].iter().map(|v| v.exp() / z).collect();
    assert_close(&oracle, &[0.0900, 0.2447, 0.6652], 1e-4);
    assert_close(tape.value(y).data(), &oracle, 1e-12);

    // large logits stay finite thanks to max subtraction
    let x = tape.constant(t(&[2], &[1000., 1000.]));
    let y = tape.softmax_lastdim(x).unwrap();
    assert_close(tape.value(y).data(), &[0.5, 0.5], 1e-15);
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1., 5., 2., 0., 0., 9.]));
    let y = tape
        .masked_softmax_lastdim(x, &[true, false, true, true, true, false])
        .unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[1], 0.0);
    assert_eq!(v[5], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    assert_close(&v[3..5], &[0.5, 0.5], 1e-15);
    assert!(tape.masked_softmax_lastdim(x, &[false; 6]).is_err());
}

#[test]
fn leaky_relu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0., 3.5, -2.]));
    let y = tape.leaky_relu(x, 0.01).unwrap();
    assert_close(tape.value(y).data(), &[0., 3.5, -0.02], 1e-15);
    assert!(tape.leaky_relu(x, 1.0).is_err());
    assert!(tape.leaky_relu(x, 0.0).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_product_rule() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.param(Tensor::scalar(-4.0));
    let p = tape.mul(x, y).unwrap();
    tape.backward(p).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[-4.0]);
    assert_eq!(tape.grad(y).unwrap(), &[3.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(vec![2]));
    assert!(matches!(tape.backward(x), Err(NumericsError::Contract(_))));
}

#[test]
fn non_finite_output_names_the_op() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1], &[1e300]));
    let err = tape.scale(x, 1e300).unwrap_err();
    assert!(matches!(err, NumericsError::NonFinite { op: "scale" }));
}

/// Logistic regression loss BCE(σ(w·x)) written with tape primitives:
/// σ(z) is the second entry of softmax([0, z]).
fn logistic_loss(tape: &mut Tape, w: Var, x: Var, label: f64) -> Result<Var, NumericsError> {
    let z = tape.matmul(x, w)?;
    let zero = tape.constant(Tensor::zeros(vec![1, 1]));
    let pair = tape.concat_lastdim(&[zero, z])?;
    let p = tape.softmax_lastdim(pair)?;
    let click = tape.slice_cols(p, 1, 1)?;
    tape.binary_cross_entropy(click, &[label])
}

#[test]
fn backward_matches_finite_differences_on_logistic_loss() {
    let x = t(&[1, 3], &[0.3, -1.2, 2.0]);
    let w = t(&[3, 1], &[0.4, 0.1, -0.25]);
    let mut tape = Tape::new();
    let wv = tape.param(w.clone());
    let xv = tape.constant(x.clone());
    let loss = logistic_loss(&mut tape, wv, xv, 1.0).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(wv).unwrap().to_vec();

    // closed form: dL/dw = (σ(w·x) - y) x
    let z: f64 = x.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    let s = 1.0 / (1.0 + (-z).exp());
    let closed: Vec<f64> = x.data().iter().map(|xi| (s - 1.0) * xi).collect();
    assert_close(&analytic, &closed, 1e-12);

    let numeric = central_differences(
        |probe| {
            let mut t2 = Tape::new();
            let wv = t2.param(Tensor::new(vec![3, 1], probe.to_vec())?);
            let xv = t2.constant(x.clone());
            let l = logistic_loss(&mut t2, wv, xv, 1.0)?;
            Ok::<_, NumericsError>(t2.value(l).item())
        },
        w.data(),
        1e-5,
    )
    .unwrap();
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!((a - n).abs() / a.abs().max(1e-12) < 1e-4, "{a} vs {n}");
    }
}

#[test]
fn gradcheck_half_squared_norm() {
    let x = t(&[4], &[0.5, -3.0, 2.25, 10.0]);
    let err = check_gradients(
        |tape, x| {
            let sq = tape.mul(x, x)?;
            let s = tape.sum(sq)?;
            tape.scale(s, 0.5)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = random(&mut rng, &[1, 4]);
    let target = t(&[1, 4], &[0., 0., 1., 0.]);
    let err = check_gradients(
        |tape, x| {
            let lp = tape.log_softmax_lastdim(x)?;
            let y = tape.constant(target.clone());
            let picked = tape.mul(lp, y)?;
            let s = tape.sum(picked)?;
            tape.scale(s, -1.0)
        },
        &logits,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_rejects_vector_functions() {
    let x = t(&[2], &[1., 2.]);
    assert!(check_gradients(|tape, x| tape.scale(x, 2.0), &x, 1e-5).is_err());
    assert!(check_gradients(|tape, x| tape.sum(x), &x, 0.0).is_err());
}

/// Reduces any tensor to a scalar through a fixed random projection so every
/// output coordinate influences the loss.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant(random(&mut rng, &shape));
    let m = tape.mul(y, r)?;
    tape.sum(m)
}

#[test]
fn every_differentiable_op_passes_gradcheck() {
    for seed in [5, 6] {
        for (name, err) in op_suite(seed).unwrap() {
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

fn attend_fixture() -> (Arc<Adjacency>, Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let adj = Arc::new(Adjacency::from_edges(
        4,
        &[(0, 1), (1, 2), (2, 3), (3, 3), (0, 3), (1, 1), (2, 0)],
    ));
    (
        adj,
        random(&mut rng, &[4, 1]),
        random(&mut rng, &[4, 1]),
        random(&mut rng, &[4, 3]),
    )
}

#[test]
fn graph_attend_passes_gradcheck_in_every_input() {
    let (adj, s, n, h) = attend_fixture();
    for which in 0..3 {
        let base = [s.clone(), n.clone(), h.clone()];
        let err = check_gradients(
            |tape, x| {
                let mut vars = Vec::new();
                for (i, b) in base.iter().enumerate() {
                    vars.push(if i == which { x } else { tape.constant(b.clone()) });
                }
                let y = tape.graph_attend(vars[0], vars[1], vars[2], adj.clone(), 0.2)?;
                project(tape, y, 99)
            },
            &base[which],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "input {which}: {err}");
    }
}

#[test]
fn graph_attend_coefficients_normalize_and_isolated_nodes_are_zero() {
    let (_, s, n, h) = attend_fixture();
    let adj = Arc::new(Adjacency::from_edges(4, &[(0, 1), (2, 1), (3, 2)]));
    let mut tape = Tape::new();
    let (sv, nv, hv) = (tape.constant(s), tape.constant(n), tape.constant(h.clone()));
    let y = tape.graph_attend(sv, nv, hv, adj, 0.01).unwrap();
    let (adj, alpha) = tape.attention_coefficients(y).unwrap();
    let sum1: f64 = alpha[adj.edge_range(1)].iter().sum();
    assert!((sum1 - 1.0).abs() < 1e-12);
    // single neighbor → weight 1 and the output copies it
    assert_eq!(alpha[adj.edge_range(2)], [1.0]);
    assert_eq!(tape.value(y).row_slice(2), h.row_slice(3));
    assert_eq!(tape.value(y).row_slice(0), &[0.0; 3]);
}

#[test]
fn diamond_fan_out_sums_path_gradients() {
    // f(x) = (2x) * (x + 3): two paths from x meet at the product.
    // df/dx = 2(x + 3) + 2x = 4x + 6.
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.5));
    let three = tape.constant(Tensor::scalar(3.0));
    let left = tape.scale(x, 2.0).unwrap();
    let right = tape.add(x, three).unwrap();
    let f = tape.mul(left, right).unwrap();
    tape.backward(f).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0 * 1.5 + 6.0]);
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let y = tape.scale(x, 3.0).unwrap();
    tape.backward(y).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    tape.zero_grads();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0]);
}

#[test]
fn batchnorm_eval_is_affine_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gamma = random(&mut rng, &[3]);
    let beta = random(&mut rng, &[3]);
    let (mean, var) = ([0.2, -0.1, 0.0], [0.5, 2.0, 1.0]);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let (xv, g, b) = (tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
        let y = tape.batchnorm_eval(xv, g, b, &mean, &var, 1e-5).unwrap();
        tape.value(y).clone()
    };
    let x1 = random(&mut rng, &[2, 3]);
    let x2 = random(&mut rng, &[2, 3]);
    assert_eq!(run(&x1), run(&x1));
    // affine: f(a x1 + (1-a) x2) = a f(x1) + (1-a) f(x2)
    let a = 0.3;
    let mix: Vec<f64> = x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + (1.0 - a) * q).collect();
    let lhs = run(&t(&[2, 3], &mix));
    let (f1, f2) = (run(&x1), run(&x2));
    let rhs: Vec<f64> = f1.data().iter().zip(f2.data()).map(|(p, q)| a * p + (1.0 - a) * q).collect();
    assert_close(lhs.data(), &rhs, 1e-12);
}

#[test]
fn binary_cross_entropy_clamps() {
    let mut tape = Tape::new();
    let p = tape.param(t(&[3, 1], &[0.0, 1.0, 0.5]));
    let l = tape.binary_cross_entropy(p, &[0.0, 1.0, 1.0]).unwrap();
    let expected = (2.0 * -(1.0f64 - PROB_CLAMP).ln() + 2f64.ln()) / 3.0;
    assert!((tape.value(l).item() - expected).abs() < 1e-12);
    tape.backward(l).unwrap();
    let g = tape.grad(p).unwrap();
    assert_eq!(&g[..2], &[0.0, 0.0]);
    assert!((g[2] - (-2.0 / 3.0)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in proptest::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, row.len()], &row));
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let xs = tape.constant(t(&[1, row.len()], &shifted));
        let y = tape.softmax_lastdim(x).unwrap();
        let ys = tape.softmax_lastdim(xs).unwrap();
        let total: f64 = tape.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gathered_rows_round_trip_through_backward(idx in proptest::collection::vec(0usize..5, 1..8)) {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::zeros(vec![5, 2]));
        let rows = tape.gather_rows(table, &idx).unwrap();
        let s = tape.sum(rows).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(table).unwrap();
        for r in 0..5 {
            let count = idx.iter().filter(|&&i| i == r).count() as f64;
            prop_assert_eq!(g[2 * r], count);
        }
    }
}
