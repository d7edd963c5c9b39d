//! Target-conditioned multi-interest extraction.
//!
//! Each of the `K` routes scores every refined sequence position against the
//! target with its own two-layer network and pools the sequence with the
//! resulting attention row.

use rand::Rng;

use crate::numerics::{init, softmax_in_place, Binder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct InterestHeadParams {
    /// `2d × d_a`
    pub hidden_weight: ParamId,
    pub hidden_bias: ParamId,
    /// `d_a × 1`. No output bias: a shared offset cancels in the softmax.
    pub output_weight: ParamId,
}

#[derive(Clone, Debug)]
pub struct InterestParams {
    pub heads: Vec<InterestHeadParams>,
    pub d: usize,
    pub hidden: usize,
}

impl InterestParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        routes: usize,
        d: usize,
        hidden: usize,
    ) -> Self {
        let heads = (0..routes)
            .map(|k| InterestHeadParams {
                hidden_weight: store.add(
                    format!("interest.head{k}.W1"),
                    init::glorot_uniform(rng, 2 * d, hidden),
                    true,
                ),
                hidden_bias: store.add(format!("interest.head{k}.b1"), Tensor::zeros(vec![hidden]), true),
                output_weight: store.add(
                    format!("interest.head{k}.W2"),
                    init::glorot_uniform(rng, hidden, 1),
                    true,
                ),
            })
            .collect();
        Self { heads, d, hidden }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder, store: &ParamStore) -> InterestVars {
        InterestVars {
            heads: self
                .heads
                .iter()
                .map(|h| {
                    [h.hidden_weight, h.hidden_bias, h.output_weight].map(|id| binder.bind(tape, store, id))
                })
                .collect(),
        }
    }
}

/// Bound head parameters: `[W1, b1, W2]` per route.
#[derive(Clone, Debug)]
pub struct InterestVars {
    pub heads: Vec<[Var; 3]>,
}

/// How the per-position scores become pooling weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    /// Masked softmax over valid positions.
    #[default]
    Softmax,
    /// Raw scores, zeroed on padding.
    Unnormalized,
}

#[derive(Clone, Copy, Debug)]
pub struct InterestMatrix {
    /// `K × d`
    pub values: Var,
    /// `K × n`, zero on padding positions.
    pub attention: Var,
}

/// Extracts `K` interest vectors from the `n × d` refined sequence `h_star`
/// for the `1 × d` target embedding `target`. Positions at or beyond
/// `valid_len` are padding.
pub fn extract_interests(
    tape: &mut Tape,
    h_star: Var,
    target: Var,
    vars: &InterestVars,
    valid_len: usize,
    pooling: Pooling,
    slope: f64,
) -> Result<InterestMatrix> {
    let n = tape.value(h_star).rows();
    if valid_len == 0 {
        return Err(Error::EmptySequence);
    }
    if valid_len > n {
        return Err(Error::Data(format!("valid length {valid_len} exceeds {n} positions")));
    }
    let keep: Vec<bool> = (0..n).map(|i| i < valid_len).collect();
    let tiled = tape.repeat_rows(target, n)?;
    let pairs = tape.concat_lastdim(&[h_star, tiled])?;

    let mut rows = Vec::with_capacity(vars.heads.len());
    for &[w1, b1, w2] in &vars.heads {
        let hidden = tape.dense(pairs, w1, b1)?;
        let hidden = tape.leaky_relu(hidden, slope)?;
        let scores = tape.matmul(hidden, w2)?;
        let scores = tape.reshape(scores, &[1, n])?;
        let weights = match pooling {
            Pooling::Softmax => tape.masked_softmax_lastdim(scores, &keep)?,
            Pooling::Unnormalized if valid_len == n => scores,
            Pooling::Unnormalized => {
                let mask = Tensor::row(&keep.iter().map(|&k| f64::from(u8::from(k))).collect::<Vec<_>>());
                let mask = tape.constant(mask);
                tape.mul(scores, mask)?
            }
        };
        rows.push(weights);
    }
    let attention = tape.concat_rows(&rows)?;
    let values = tape.matmul(attention, h_star)?;
    Ok(InterestMatrix { values, attention })
}

/// Row-wise softmax of an interest matrix on the tape.
pub fn interest_distributions(tape: &mut Tape, values: Var) -> Result<Var> {
    Ok(tape.softmax_lastdim(values)?)
}

/// Row-wise softmax of a `K × d` tensor.
pub fn interest_distributions_of(values: &Tensor) -> Tensor {
    let mut out = values.clone();
    let cols = out.cols();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row, None);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SLOPE: f64 = 0.01;

    fn setup(routes: usize, d: usize, hidden: usize, seed: u64) -> (ParamStore, InterestParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = InterestParams::register(&mut store, &mut rng, routes, d, hidden);
        (store, p)
    }

    fn run(
        store: &ParamStore,
        p: &InterestParams,
        h: &Tensor,
        target: &[f64],
        valid_len: usize,
        pooling: Pooling,
    ) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let vars = p.bind(&mut tape, &mut binder, store);
        let hs = tape.constant(h.clone());
        let t = tape.constant(Tensor::row(target));
        let m = extract_interests(&mut tape, hs, t, &vars, valid_len, pooling, SLOPE).unwrap();
        (tape.value(m.values).clone(), tape.value(m.attention).clone())
    }

    #[test]
    fn singleton_sequence_is_copied_by_every_route() {
        let (store, p) = setup(3, 2, 4, 1);
        let h = Tensor::row(&[0.7, -1.3]);
        let (v, a) = run(&store, &p, &h, &[0.1, 0.2], 1, Pooling::Softmax);
        assert_eq!(a.data(), &[1.0, 1.0, 1.0]);
        for k in 0..3 {
            assert_eq!(v.row_slice(k), &[0.7, -1.3]);
        }
    }

    #[test]
    fn identical_positions_pool_to_that_position() {
        let (store, p) = setup(4, 3, 5, 2);
        let row = [0.25, -0.5, 2.0];
        let h = Tensor::from_rows(&vec![row.to_vec(); 6]).unwrap();
        let (v, _) = run(&store, &p, &h, &[1.0, 0.0, -1.0], 6, Pooling::Softmax);
        for k in 0..4 {
            for c in 0..3 {
                assert!((v.at(k, c) - row[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_set_weights_match_scalar_transcription() {
        let h = [[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]];
        let target = [0.2, 0.4];
        // one route, d = 2, hidden width 2
        let w1 = [[0.5, -0.3], [0.1, 0.8], [-0.6, 0.2], [0.4, 0.4]];
        let b1 = [0.05, -0.1];
        let w2 = [1.2, -0.7];

        let mut store = ParamStore::new();
        let heads = vec![InterestHeadParams {
            hidden_weight: store.add("w1", Tensor::new(vec![4, 2], w1.concat()).unwrap(), true),
            hidden_bias: store.add("b1", Tensor::row(&b1).reshaped(vec![2]).unwrap(), true),
            output_weight: store.add("w2", Tensor::new(vec![2, 1], w2.to_vec()).unwrap(), true),
        }];
        let p = InterestParams { heads, d: 2, hidden: 2 };
        let ht = Tensor::from_rows(&h.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let (v, a) = run(&store, &p, &ht, &target, 3, Pooling::Softmax);

        let leaky = |x: f64| if x >= 0.0 { x } else { SLOPE * x };
        let logits: Vec<f64> = h
            .iter()
            .map(|hi| {
                let input = [hi[0], hi[1], target[0], target[1]];
                (0..2)
                    .map(|j| {
                        let z: f64 = (0..4).map(|r| input[r] * w1[r][j]).sum::<f64>() + b1[j];
                        leaky(z) * w2[j]
                    })
                    .sum()
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let weights: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        for i in 0..3 {
            assert!((a.at(0, i) - weights[i]).abs() < 1e-12);
        }
        for c in 0..2 {
            let expected: f64 = (0..3).map(|i| weights[i] * h[i][c]).sum();
            assert!((v.at(0, c) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (store, p) = setup(2, 2, 2, 3);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let vars = p.bind(&mut tape, &mut binder, &store);
        let hs = tape.constant(Tensor::row(&[1.0, 2.0]));
        let t = tape.constant(Tensor::row(&[0.0, 0.0]));
        let err = extract_interests(&mut tape, hs, t, &vars, 0, Pooling::Softmax, SLOPE).unwrap_err();
        assert!(matches!(err, Error::EmptySequence));
    }

    #[test]
    fn unnormalized_pooling_uses_raw_scores() {
        let (store, p) = setup(2, 3, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Tensor::new(vec![5, 3], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (v, a) = run(&store, &p, &h, &[0.3, 0.1, -0.2], 3, Pooling::Unnormalized);
        for k in 0..2 {
            assert_eq!(&a.row_slice(k)[3..], &[0.0, 0.0]);
            for c in 0..3 {
                let expected: f64 = (0..3).map(|i| a.at(k, i) * h.at(i, c)).sum();
                assert!((v.at(k, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distributions_match_examples() {
        let p = interest_distributions_of(&Tensor::zeros(vec![1, 4]));
        assert!(p.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let p = interest_distributions_of(&Tensor::filled(vec![1, 5], 3.7));
        assert!(p.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let p = interest_distributions_of(&Tensor::row(&[1.0, 2.0, 3.0, 4.0]));
        let z: f64 = (1..=4).map(|i| (i as f64).exp()).sum();
        for (i, x) in p.data().iter().enumerate() {
            let expected = ((i + 1) as f64).exp() / z;
            assert!((x - expected).abs() < 1e-12);
        }
        for (x, e) in p.data().iter().zip([0.0321, 0.0871, 0.2369, 0.6439]) {
            assert!((x - e).abs() < 1e-4);
        }
    }

    #[test]
    fn gradient_check_through_extraction() {
        let (store, p) = setup(3, 4, 5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = Tensor::new(vec![5, 4], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let target = Tensor::row(&[0.3, -0.4, 0.2, 0.9]);
        for pooling in [Pooling::Softmax, Pooling::Unnormalized] {
            // gradient with respect to the sequence
            let err = check_gradients(
                |tape, x| {
                    let mut binder = Binder::new(&store);
                    let vars = p.bind(tape, &mut binder, &store);
                    let t = tape.constant(target.clone());
                    let m = extract_interests(tape, x, t, &vars, 4, pooling, SLOPE)?;
                    let sq = tape.mul(m.values, m.values)?;
                    Ok::<_, Error>(tape.sum(sq)?)
                },
                &h,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{pooling:?} sequence error {err}");
            // gradient with respect to the target and the first head's W1
            let err = check_gradients(
                |tape, x| {
                    let mut binder = Binder::new(&store);
                    let vars = p.bind(tape, &mut binder, &store);
                    let hs = tape.constant(h.clone());
                    let m = extract_interests(tape, hs, x, &vars, 5, pooling, SLOPE)?;
                    let sq = tape.mul(m.values, m.values)?;
                    Ok::<_, Error>(tape.sum(sq)?)
                },
                &target,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{pooling:?} target error {err}");
            let w1 = store.get(p.heads[0].hidden_weight).clone();
            let err = check_gradients(
                |tape, x| {
                    let mut binder = Binder::new(&store);
                    let mut vars = p.bind(tape, &mut binder, &store);
                    vars.heads[0][0] = x;
                    let hs = tape.constant(h.clone());
                    let t = tape.constant(target.clone());
                    let m = extract_interests(tape, hs, t, &vars, 5, pooling, SLOPE)?;
                    let sq = tape.mul(m.values, m.values)?;
                    Ok::<_, Error>(tape.sum(sq)?)
                },
                &w1,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{pooling:?} weight error {err}");
        }
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn padding_never_leaks_into_interests(
            h in matrix(6, 3),
            junk in matrix(6, 3),
            valid_len in 1usize..=6,
            seed in 0u64..1000,
        ) {
            let (store, p) = setup(3, 3, 4, seed);
            let mut altered = h.clone();
            for i in valid_len..6 {
                for c in 0..3 {
                    altered.data_mut()[i * 3 + c] = junk.at(i, c);
                }
            }
            let target = [0.5, -0.1, 0.2];
            for pooling in [Pooling::Softmax, Pooling::Unnormalized] {
                let (v1, a1) = run(&store, &p, &h, &target, valid_len, pooling);
                let (v2, a2) = run(&store, &p, &altered, &target, valid_len, pooling);
                prop_assert_eq!(v1.data(), v2.data());
                for k in 0..3 {
                    prop_assert!(a1.row_slice(k)[valid_len..].iter().all(|&x| x == 0.0));
                }
                if pooling == Pooling::Softmax {
                    for k in 0..3 {
                        let s: f64 = a2.row_slice(k)[..valid_len].iter().sum();
                        prop_assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn interests_lie_in_the_convex_hull(
            h in matrix(7, 4),
            valid_len in 1usize..=7,
            seed in 0u64..1000,
        ) {
            let (store, p) = setup(4, 4, 6, seed);
            let (v, _) = run(&store, &p, &h, &[0.1, 0.2, -0.3, 0.4], valid_len, Pooling::Softmax);
            for c in 0..4 {
                let col: Vec<f64> = (0..valid_len).map(|i| h.at(i, c)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for k in 0..4 {
                    prop_assert!(v.at(k, c) >= lo - 1e-12 && v.at(k, c) <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn distributions_ignore_constant_shifts(v in matrix(3, 5), shift in -50.0f64..50.0) {
            let shifted = Tensor::new(vec![3, 5], v.data().iter().map(|x| x + shift).collect()).unwrap();
            let a = interest_distributions_of(&v);
            let b = interest_distributions_of(&shifted);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for row in a.data().chunks(5) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
