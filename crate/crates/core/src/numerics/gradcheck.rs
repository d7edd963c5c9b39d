//! Central finite-difference gradient checking.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Adjacency, NumericsError, Tape, Tensor, Var};

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every `i`.
pub fn central_differences<F, E>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>, E>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
    E: From<NumericsError>,
{
    if !(step > 0.0) {
        return Err(NumericsError::Contract(format!("step must be positive, got {step}")).into());
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe)?;
        probe[i] = x[i] - step;
        let lo = f(&probe)?;
        probe[i] = x[i];
        out.push((hi - lo) / (2.0 * step));
    }
    Ok(out)
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns the maximum relative error.
pub fn check_gradients<F, E>(f: F, x: &Tensor, step: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    if !tape.value(y).is_scalar() {
        return Err(NumericsError::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.value(y).shape()
        ))
        .into());
    }
    tape.backward(y)?;
    let analytic = tape.grad_tensor(xv).into_data();

    let shape = x.shape().to_vec();
    let numeric = central_differences::<_, E>(
        |probe| {
            let mut t = Tape::new();
            let v = t.param(Tensor::new(shape.clone(), probe.to_vec()).map_err(E::from)?);
            let out = f(&mut t, v)?;
            Ok(t.value(out).item())
        },
        x.data(),
        step,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("positive shape")
}

/// Reduces any output to a scalar through a fixed random projection so every
/// coordinate reaches the loss.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant(random_tensor(&mut rng, &shape));
    let m = tape.mul(y, r)?;
    tape.sum(m)
}

type OpCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape, Var) -> Result<Var, NumericsError>>);

/// Gradient check of every differentiable op on small random inputs.
/// Returns the maximum relative error per case.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let other = random_tensor(&mut rng, &[3, 4]);
    let right = random_tensor(&mut rng, &[4, 2]);
    let bias = random_tensor(&mut rng, &[4]);
    let bias2 = random_tensor(&mut rng, &[2]);
    let col = random_tensor(&mut rng, &[3, 1]);
    let adj = Arc::new(Adjacency::from_edges(
        4,
        &[(0, 1), (1, 2), (2, 3), (3, 3), (0, 3), (1, 1), (2, 0)],
    ));
    let score = random_tensor(&mut rng, &[4, 1]);
    let values = random_tensor(&mut rng, &[4, 3]);
    let target = random_tensor(&mut rng, &[4, 1]);

    let c = |t: &Tensor| t.clone();
    let (o1, o2, o3, o4, o5) = (c(&other), c(&other), c(&other), c(&other), c(&other));
    let (o6, o7) = (c(&other), c(&other));
    let (r1, r2, r3) = (c(&right), c(&right), c(&right));
    let (b1, b2, b3, b4, b5) = (c(&bias), c(&bias), c(&bias), c(&bias), c(&bias));
    let (col1, col2) = (c(&col), c(&col));
    let (s1, s2, v1, v2) = (c(&score), c(&score), c(&values), c(&values));
    let (a1, a2, a3) = (adj.clone(), adj.clone(), adj);

    let cases: Vec<OpCase> = vec![
        ("matmul_left", vec![3, 4], Box::new(move |t, x| {
            let r = t.constant(r1.clone());
            t.matmul(x, r)
        })),
        ("matmul_right", vec![4, 2], Box::new(move |t, x| {
            let l = t.constant(o1.clone());
            t.matmul(l, x)
        })),
        ("transpose", vec![3, 4], Box::new(|t, x| t.transpose(x))),
        ("add", vec![3, 4], Box::new(move |t, x| {
            let o = t.constant(o2.clone());
            t.add(x, o)
        })),
        ("sub", vec![3, 4], Box::new(move |t, x| {
            let o = t.constant(o3.clone());
            t.sub(o, x)
        })),
        ("mul", vec![3, 4], Box::new(move |t, x| {
            let o = t.constant(o4.clone());
            t.mul(x, o)
        })),
        ("scale", vec![3, 4], Box::new(|t, x| t.scale(x, -2.5))),
        ("add_row", vec![3, 4], Box::new(move |t, x| {
            let b = t.constant(b1.clone());
            t.add_row(x, b)
        })),
        ("add_row_bias", vec![4], Box::new(move |t, b| {
            let x = t.constant(o5.clone());
            t.add_row(x, b)
        })),
        ("mul_col", vec![3, 4], Box::new(move |t, x| {
            let k = t.constant(col1.clone());
            t.mul_col(x, k)
        })),
        ("mul_col_factor", vec![3, 1], Box::new(move |t, k| {
            let x = t.constant(o6.clone());
            t.mul_col(x, k)
        })),
        ("leaky_relu", vec![3, 4], Box::new(|t, x| t.leaky_relu(x, 0.2))),
        ("softmax", vec![3, 4], Box::new(|t, x| t.softmax_lastdim(x))),
        ("masked_softmax", vec![3, 4], Box::new(|t, x| {
            t.masked_softmax_lastdim(x, &[true, false, true, true, false, true, true, true, true, true, true, false])
        })),
        ("log_softmax", vec![3, 4], Box::new(|t, x| t.log_softmax_lastdim(x))),
        ("mean", vec![3, 4], Box::new(|t, x| t.mean(x))),
        ("sum_lastdim", vec![3, 4], Box::new(|t, x| t.sum_lastdim(x))),
        ("mean_rows", vec![3, 4], Box::new(|t, x| t.mean_rows(x))),
        ("concat_lastdim", vec![3, 4], Box::new(move |t, x| {
            let o = t.constant(col2.clone());
            t.concat_lastdim(&[o, x, x])
        })),
        ("concat_rows", vec![3, 4], Box::new(move |t, x| {
            let o = t.constant(o7.clone());
            t.concat_rows(&[x, o, x])
        })),
        ("slice_cols", vec![3, 4], Box::new(|t, x| t.slice_cols(x, 1, 2))),
        ("slice_rows", vec![3, 4], Box::new(|t, x| t.slice_rows(x, 1, 2))),
        ("gather_rows", vec![3, 4], Box::new(|t, x| t.gather_rows(x, &[2, 0, 2, 1]))),
        ("repeat_rows", vec![1, 4], Box::new(|t, x| t.repeat_rows(x, 3))),
        ("reshape", vec![3, 4], Box::new(|t, x| t.reshape(x, &[2, 6]))),
        ("dense", vec![3, 4], Box::new(move |t, x| {
            let w = t.constant(r2.clone());
            let b = t.constant(bias2.clone());
            t.dense(x, w, b)
        })),
        ("dense_weight", vec![4, 2], Box::new(move |t, w| {
            let x = t.constant(other.clone());
            let b = t.constant(Tensor::zeros(vec![2]));
            t.dense(x, w, b)
        })),
        ("batchnorm_train", vec![3, 4], Box::new(move |t, x| {
            let g = t.constant(b2.clone());
            let b = t.constant(b3.clone());
            Ok(t.batchnorm_train(x, g, b, 1e-5)?.0)
        })),
        ("batchnorm_train_gamma", vec![4], Box::new(move |t, g| {
            let x = t.constant(r3.clone().reshaped(vec![2, 4])?);
            let b = t.constant(b4.clone());
            Ok(t.batchnorm_train(x, g, b, 1e-5)?.0)
        })),
        ("batchnorm_eval", vec![3, 4], Box::new(move |t, x| {
            let g = t.constant(b5.clone());
            let b = t.constant(bias.clone());
            t.batchnorm_eval(x, g, b, &[0.1, -0.2, 0.0, 0.3], &[1.0, 0.5, 2.0, 0.1], 1e-5)
        })),
        ("binary_cross_entropy", vec![3, 1], Box::new(|t, p| {
            // logits mapped into (0, 1) first
            let zero = t.constant(Tensor::zeros(vec![3, 1]));
            let pair = t.concat_lastdim(&[zero, p])?;
            let s = t.softmax_lastdim(pair)?;
            let click = t.slice_cols(s, 1, 1)?;
            t.binary_cross_entropy(click, &[1.0, 0.0, 1.0])
        })),
        ("graph_attend_source", vec![4, 1], Box::new(move |t, s| {
            let n = t.constant(s1.clone());
            let h = t.constant(v1.clone());
            t.graph_attend(s, n, h, a1.clone(), 0.2)
        })),
        ("graph_attend_target", vec![4, 1], Box::new(move |t, n| {
            let s = t.constant(s2.clone());
            let h = t.constant(v2.clone());
            t.graph_attend(s, n, h, a2.clone(), 0.2)
        })),
        ("graph_attend_values", vec![4, 3], Box::new(move |t, h| {
            let s = t.constant(score.clone());
            let n = t.constant(target.clone());
            t.graph_attend(s, n, h, a3.clone(), 0.2)
        })),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, shape, f)) in cases.into_iter().enumerate() {
        let x = random_tensor(&mut rng, &shape);
        let proj = seed.wrapping_add(1000 + i as u64);
        let err = check_gradients(
            |tape, x| {
                let y = f(tape, x)?;
                project(tape, y, proj)
            },
            &x,
            1e-5,
        )?;
        out.push((name, err));
    }
    Ok(out)
}
