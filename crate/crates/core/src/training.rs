//! Losses, the Adam optimizer and the batched training step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregate::BatchNormMode;
use crate::data::Sample;
use crate::model::{stack, Model};
use crate::numerics::{Binder, Gradients, NumericsError, ParamStore, SparseGrads, Tape, Tensor, Var, PROB_CLAMP};
use crate::rng::{self, SeedStreams};
use crate::{Error, Result};

/// Binary cross-entropy of one clamped click probability.
pub fn ce_loss(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

/// `½ KL(p‖q) + ½ KL(q‖p)` for each pair of rows.
pub fn ssl_loss(first: &[Vec<f64>], second: &[Vec<f64>]) -> Vec<f64> {
    first
        .iter()
        .zip(second)
        .map(|(p, q)| 0.5 * kl(p, q) + 0.5 * kl(q, p))
        .collect()
}

pub fn total_loss(ce: f64, ssl: &[f64], beta: f64) -> f64 {
    ce + beta * ssl.iter().sum::<f64>()
}

/// Per-route view disagreement on the tape for two `K × d` interest
/// matrices: `½ Σ_i (p_i − q_i)(ln p_i − ln q_i)` over the row softmaxes,
/// returned as `K × 1`.
pub fn ssl_routes(tape: &mut Tape, first: Var, second: Var) -> Result<Var> {
    let p = tape.softmax_lastdim(first)?;
    let q = tape.softmax_lastdim(second)?;
    let lp = tape.log_softmax_lastdim(first)?;
    let lq = tape.log_softmax_lastdim(second)?;
    let dp = tape.sub(p, q)?;
    let dl = tape.sub(lp, lq)?;
    let prod = tape.mul(dp, dl)?;
    let per_route = tape.sum_lastdim(prod)?;
    Ok(tape.scale(per_route, 0.5)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    /// Batch mean of each route's view disagreement.
    pub ssl_per_route: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn ssl_total(&self) -> f64 {
        self.ssl_per_route.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter. Non-finite
/// gradients abort before anything changes.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if !grads.all_finite() {
        return Err(NumericsError::NonFinite { op: "adam_step" }.into());
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.param(id).trainable {
            continue;
        }
        let g = grads.get(id);
        let (m, v) = (&mut state.first[id.index()], &mut state.second[id.index()]);
        for (((p, &g), m), v) in store.get_mut(id).data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            *p -= state.lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Loss, gradients and side products of one batch, before any update.
pub struct BatchResult {
    pub loss: LossBreakdown,
    pub grads: Gradients,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
    /// Click probabilities in sample order.
    pub probs: Vec<f64>,
}

/// Forward and backward through a batch with fixed view seeds.
///
/// The batch tape sees the per-sample interests and contexts as leaves; their
/// gradients are pushed back into each sample tape through the surrogate
/// `Σ V∘∂V + Σ ctx∘∂ctx + (β / B)·Σ ssl`, whose parameter gradients equal
/// those of the full loss.
pub fn compute_gradients(model: &Model, batch: &[Sample], view_seeds: &[Option<[u64; 2]>]) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    assert_eq!(batch.len(), view_seeds.len());
    let h = &model.hyper;
    let (kd, cw) = (h.routes * h.d, h.context_width());
    let b = batch.len();

    let mut encoded: Vec<_> = batch
        .par_iter()
        .zip(view_seeds)
        .map(|(s, &seeds)| model.encode(s, seeds))
        .collect::<Result<_>>()?;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = encoded
        .iter()
        .map(|e| (e.tape.value(e.values).data().to_vec(), e.tape.value(e.context).data().to_vec()))
        .collect();
    let (v_all, c_all) = stack(&rows, kd, cw)?;

    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.store);
    let v = tape.param(v_all);
    let c = tape.param(c_all);
    let head = model.head_forward(&mut tape, &mut binder, v, c, BatchNormMode::Train)?;
    let labels: Vec<f64> = batch.iter().map(|s| f64::from(s.label)).collect();
    let click = tape.slice_cols(head.probs, 1, 1)?;
    let ce = tape.binary_cross_entropy(click, &labels)?;
    tape.backward(ce)?;
    let ce_value = tape.value(ce).item();
    let probs = tape.value(click).data().to_vec();
    let head_grads = binder.collect(&tape);
    let grad_v = tape.grad_tensor(v);
    let grad_c = tape.grad_tensor(c);

    let beta = h.effective_beta();
    let sample_grads: Vec<(SparseGrads, Vec<f64>)> = encoded
        .par_iter_mut()
        .enumerate()
        .map(|(i, e)| {
            let t = &mut e.tape;
            let gv = Tensor::new(vec![h.routes, h.d], grad_v.row_slice(i).to_vec())?;
            let gv = t.constant(gv);
            let gc = t.constant(Tensor::new(vec![1, cw], grad_c.row_slice(i).to_vec())?);
            let pv = t.mul(e.values, gv)?;
            let pc = t.mul(e.context, gc)?;
            let sv = t.sum(pv)?;
            let sc = t.sum(pc)?;
            let mut surrogate = t.add(sv, sc)?;
            let mut ssl = Vec::new();
            if let Some(s) = e.ssl {
                ssl = t.value(s).data().to_vec();
                if beta > 0.0 {
                    let total = t.sum(s)?;
                    let weighted = t.scale(total, beta / b as f64)?;
                    surrogate = t.add(surrogate, weighted)?;
                }
            }
            t.backward(surrogate)?;
            Ok((e.binder.collect(t), ssl))
        })
        .collect::<Result<_>>()?;

    let mut grads = Gradients::zeros_like(&model.store);
    grads.merge(&head_grads);
    let mut ssl_per_route = vec![0.0; h.routes];
    for (g, ssl) in &sample_grads {
        grads.merge(g);
        for (acc, s) in ssl_per_route.iter_mut().zip(ssl) {
            *acc += s;
        }
    }
    ssl_per_route.iter_mut().for_each(|s| *s /= b as f64);
    let total = total_loss(ce_value, &ssl_per_route, beta);
    if !total.is_finite() {
        return Err(NumericsError::NonFinite { op: "total_loss" }.into());
    }
    let grad_norm = grads.global_norm();
    Ok(BatchResult {
        loss: LossBreakdown {
            ce: ce_value,
            ssl_per_route,
            total,
        },
        grads,
        grad_norm,
        batch_stats: head.batch_stats,
        probs,
    })
}

/// Model plus optimizer state and the random streams used during training.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    view_rngs: [ChaCha8Rng; 2],
}

/// Result of one optimizer step.
pub struct StepReport {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub probs: Vec<f64>,
}

impl Trainer {
    pub fn new(model: Model, streams: &SeedStreams) -> Self {
        let h = &model.hyper;
        let adam = AdamState::new(&model.store, h.lr, h.adam_beta1, h.adam_beta2, h.adam_eps);
        Self {
            adam,
            view_rngs: [streams.stream(rng::DROPOUT_VIEW_1), streams.stream(rng::DROPOUT_VIEW_2)],
            model,
        }
    }

    /// Seeds for the two dropout views of each sample, drawn only when the
    /// views are used.
    pub fn next_view_seeds(&mut self, n: usize) -> Vec<Option<[u64; 2]>> {
        if !self.model.hyper.uses_views() {
            return vec![None; n];
        }
        (0..n)
            .map(|_| Some([self.view_rngs[0].random(), self.view_rngs[1].random()]))
            .collect()
    }

    pub fn train_step(&mut self, batch: &[Sample]) -> Result<StepReport> {
        let seeds = self.next_view_seeds(batch.len());
        let mut r = compute_gradients(&self.model, batch, &seeds)?;
        r.grads.clip_global_norm(self.model.hyper.clip_norm);
        adam_step(&mut self.model.store, &r.grads, &mut self.adam)?;
        let momentum = self.model.hyper.bn_momentum;
        self.model
            .head
            .update_running_stats(&mut self.model.store, &r.batch_stats, momentum);
        Ok(StepReport {
            loss: r.loss,
            grad_norm: r.grad_norm,
            probs: r.probs,
        })
    }
}

/// The smallest complete network: `n = 4`, `d = 8`, two heads, two routes,
/// two graph layers. Used for end-to-end gradient checks.
pub mod micro {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::compute_gradients;
    use crate::data::Sample;
    use crate::model::{HyperParams, Model, TableSizes};
    use crate::numerics::{central_differences, max_relative_error, Gradients, ParamStore};
    use crate::{Error, Result};

    pub fn micro_hyper() -> HyperParams {
        HyperParams {
            d: 8,
            routes: 2,
            heads: 2,
            layers: 2,
            n_max: 4,
            interest_hidden: 6,
            expert_hidden: vec![8, 4],
            confi_hidden: vec![6, 4],
            threshold: 0.2,
            ..HyperParams::default()
        }
    }

    pub const TABLES: TableSizes = TableSizes {
        users: 3,
        items: 6,
        categories: 4,
    };

    /// Up to two fixed samples of length four.
    pub fn micro_batch(count: usize) -> Vec<Sample> {
        let s = |user, items: Vec<usize>, target, label| Sample {
            user,
            categories: items.iter().map(|i| i % 3 + 1).collect(),
            timestamps: (0..items.len() as i64).collect(),
            items,
            target_item: target,
            target_category: target % 3 + 1,
            target_timestamp: 10,
            label,
        };
        let mut all = vec![s(1, vec![1, 2, 3, 4], 5, 1), s(2, vec![3, 1, 5, 2], 4, 0)];
        all.truncate(count);
        all
    }

    /// Embeddings are redrawn from `U(-1, 1)` so attention and similarity
    /// edges are not flat, and zero-initialized biases from `U(-0.5, 0.5)`.
    /// A one-row batch normalizes every expert input to exactly `beta`, so
    /// with zero biases all hidden units would sit on the LeakyReLU kink.
    pub fn micro_model(hyper: HyperParams, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model::new(hyper, TABLES, &mut rng).expect("valid micro config");
        for id in [m.item_emb, m.category_emb, m.user_emb] {
            for x in m.store.get_mut(id).data_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            let p = m.store.param(id);
            if p.trainable && p.value.data().iter().all(|&x| x == 0.0) {
                for x in m.store.get_mut(id).data_mut() {
                    *x = rng.random_range(-0.5..0.5);
                }
            }
        }
        m
    }

    fn set_flat(store: &mut ParamStore, flat: &[f64]) {
        let mut off = 0;
        let ids: Vec<_> = store.ids().filter(|&id| store.param(id).trainable).collect();
        for id in ids {
            let n = store.get(id).numel();
            store.get_mut(id).data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Trainable values, or their gradients, flattened in registration order.
    pub fn flat(store: &ParamStore, grads: Option<&Gradients>) -> Vec<f64> {
        store
            .ids()
            .filter(|&id| store.param(id).trainable)
            .flat_map(|id| match grads {
                Some(g) => g.get(id).to_vec(),
                None => store.get(id).data().to_vec(),
            })
            .collect()
    }

    /// Max relative error between the analytic gradient of the total loss
    /// (views included) and central differences, over every trainable
    /// parameter.
    pub fn gradient_error(samples: usize, seed: u64) -> Result<f64> {
        let model = micro_model(micro_hyper(), seed);
        let batch = micro_batch(samples);
        let seeds: Vec<_> = (0..batch.len() as u64).map(|i| Some([2 * i + 1, 2 * i + 2])).collect();
        let r = compute_gradients(&model, &batch, &seeds)?;
        let analytic = flat(&model.store, Some(&r.grads));
        let x0 = flat(&model.store, None);
        let mut probe = model.clone();
        let numeric = central_differences(
            |x| {
                set_flat(&mut probe.store, x);
                Ok::<_, Error>(compute_gradients(&probe, &batch, &seeds)?.loss.total)
            },
            &x0,
            1e-5,
        )?;
        Ok(max_relative_error(&analytic, &numeric))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, prepare_dataset, SampleConfig, SynthConfig};
    use crate::model::{HyperParams, TableSizes};
    use super::micro::{flat, micro_batch, micro_hyper, micro_model};
    use rand::SeedableRng;

    #[test]
    fn ce_examples() {
        assert!((ce_loss(0.5, 1) - 2f64.ln()).abs() < 1e-15);
        assert!((ce_loss(1.0 - 1e-7, 1) - 1e-7).abs() < 1e-12);
        assert!((ce_loss(1.0, 1) - 1e-7).abs() < 1e-12);
        assert!((ce_loss(0.9, 0) - (-(0.1f64).ln())).abs() < 1e-12);
        assert!((ce_loss(0.9, 0) - 2.3026).abs() < 1e-4);
        assert!(ce_loss(0.0, 1).is_finite());
    }

    #[test]
    fn ssl_examples() {
        let p = vec![vec![0.5, 0.5], vec![0.2, 0.8]];
        assert_eq!(ssl_loss(&p, &p), vec![0.0, 0.0]);
        let q = vec![vec![0.9, 0.1], vec![0.6, 0.4]];
        assert_eq!(ssl_loss(&p, &q), ssl_loss(&q, &p));

        let pq: f64 = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let qp: f64 = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((pq - 0.5108).abs() < 1e-4 && (qp - 0.3681).abs() < 1e-4);
        let got = ssl_loss(&[vec![0.5, 0.5]], &[vec![0.9, 0.1]])[0];
        assert!((got - 0.5 * (pq + qp)).abs() < 1e-15);
        assert!((got - 0.4394).abs() < 1e-4);
    }

    #[test]
    fn symmetric_kl_is_not_bounded_by_ln_two() {
        let got = ssl_loss(&[vec![0.99, 0.01]], &[vec![0.01, 0.99]])[0];
        assert!(got > 2f64.ln());
    }

    #[test]
    fn tape_ssl_matches_scalar_version() {
        let v1 = Tensor::new(vec![2, 3], vec![0.1, -0.4, 1.2, 0.0, 0.5, -0.5]).unwrap();
        let v2 = Tensor::new(vec![2, 3], vec![0.3, 0.2, 0.9, -1.0, 0.5, 0.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(v1.clone());
        let b = tape.constant(v2.clone());
        let s = ssl_routes(&mut tape, a, b).unwrap();
        let dist = |t: &Tensor| -> Vec<Vec<f64>> {
            crate::interest::interest_distributions_of(t)
                .data()
                .chunks(3)
                .map(<[f64]>::to_vec)
                .collect()
        };
        let expected = ssl_loss(&dist(&v1), &dist(&v2));
        for (x, y) in tape.value(s).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = tape.constant(v1);
        let same = ssl_routes(&mut tape, a, c).unwrap();
        assert_eq!(tape.value(same).data(), &[0.0, 0.0]);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.7, &[0.3, 0.2], 0.0), 0.7);
        assert_eq!(total_loss(0.7, &[0.0, 0.0], 0.5), 0.7);
        assert!((total_loss(0.5, &[0.1, 0.2], 0.3) - 0.59).abs() < 1e-15);
    }

    fn tiny_store() -> (ParamStore, crate::numerics::ParamId, crate::numerics::ParamId) {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true);
        let b = store.add("b", Tensor::new(vec![1], vec![0.5]).unwrap(), true);
        (store, a, b)
    }

    #[test]
    fn adam_examples() {
        let (mut store, a, b) = tiny_store();
        let mut state = AdamState::new(&store, 1e-3, 0.9, 0.999, 1e-8);
        let mut g = Gradients::zeros_like(&store);
        adam_step(&mut store, &g, &mut state).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(store.get(a).data(), &[1.0, -2.0]);

        let (mut store, a, b2) = tiny_store();
        let mut state = AdamState::new(&store, 1e-3, 0.9, 0.999, 1e-8);
        g.get_mut(a).copy_from_slice(&[0.37, -5.0]);
        g.get_mut(b2).copy_from_slice(&[0.37]);
        adam_step(&mut store, &g, &mut state).unwrap();
        let after = store.get(a).data();
        assert!((after[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((after[1] - (-2.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(1.0 - after[0], 0.5 - store.get(b).data()[0]);
    }

    #[test]
    fn adam_refuses_non_finite_gradients() {
        let (mut store, a, _) = tiny_store();
        let mut state = AdamState::new(&store, 1e-3, 0.9, 0.999, 1e-8);
        let mut g = Gradients::zeros_like(&store);
        g.get_mut(a)[0] = f64::NAN;
        let err = adam_step(&mut store, &g, &mut state).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert_eq!(state.step, 0);
        assert_eq!(store.get(a).data(), &[1.0, -2.0]);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        for samples in [1, 2] {
            let err = micro::gradient_error(samples, 11).unwrap();
            assert!(err < 1e-3, "{samples} samples: max relative error {err}");
        }
        let model = micro_model(micro_hyper(), 11);
        let seeds = vec![Some([1, 2]), Some([3, 4])];
        let r = compute_gradients(&model, &micro_batch(2), &seeds).unwrap();
        assert!(r.loss.ssl_total() > 0.0);
    }

    #[test]
    fn undropped_views_agree_exactly() {
        let model = micro_model(HyperParams { rho: 0.0, ..micro_hyper() }, 12);
        let seeds = vec![Some([1, 2]), Some([3, 4])];
        let r = compute_gradients(&model, &micro_batch(2), &seeds).unwrap();
        assert_eq!(r.loss.ssl_per_route, vec![0.0, 0.0]);
        assert_eq!(r.loss.total, r.loss.ce);
    }

    #[test]
    fn training_steps_are_reproducible() {
        let run = || {
            let streams = SeedStreams::new(5);
            let model = micro_model(micro_hyper(), 13);
            let mut t = Trainer::new(model, &streams);
            let losses: Vec<LossBreakdown> = (0..3).map(|_| t.train_step(&micro_batch(2)).unwrap().loss).collect();
            (losses, flat(&t.model.store, None))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_beta_matches_disabled_views() {
        let run = |beta, ssl_off| {
            let streams = SeedStreams::new(5);
            let model = micro_model(HyperParams { beta, ssl_off, ..micro_hyper() }, 14);
            let mut t = Trainer::new(model, &streams);
            let ce: Vec<f64> = (0..4).map(|_| t.train_step(&micro_batch(2)).unwrap().loss.ce).collect();
            let all: Vec<f64> = t.model.store.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect();
            (ce, all)
        };
        let (ce_a, pa) = run(0.0, false);
        let (ce_b, pb) = run(0.1, true);
        assert_eq!(ce_a, ce_b);
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn cross_entropy_drops_on_a_micro_batch() {
        let streams = SeedStreams::new(9);
        let hyper = HyperParams {
            lr: 1e-2,
            ..micro_hyper()
        };
        let mut t = Trainer::new(micro_model(hyper, 15), &streams);
        let batch = micro_batch(2);
        let first = t.train_step(&batch).unwrap().loss.ce;
        let mut last = first;
        for _ in 1..50 {
            last = t.train_step(&batch).unwrap().loss.ce;
        }
        assert!(last <= 0.9 * first, "ce {first} -> {last}");
    }

    #[test]
    fn every_aggregation_mode_trains_and_predicts() {
        let (log, _) = synth_generate(
            &SynthConfig {
                num_users: 40,
                num_items: 30,
                num_interests: 4,
                seq_len: 8,
                ..SynthConfig::default()
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let cfg = SampleConfig {
            n_max: 6,
            ..SampleConfig::default()
        };
        let data = prepare_dataset(&log, 0.8, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let tables = TableSizes {
            users: data.vocab.num_users(),
            items: data.vocab.num_items(),
            categories: data.vocab.num_categories(),
        };
        for mode in crate::aggregate::AggregationMode::ALL {
            for single_expert in [false, true] {
                let hyper = HyperParams {
                    n_max: 6,
                    batch_size: 32,
                    aggregation: mode,
                    single_expert,
                    ..micro_hyper()
                };
                let model = Model::new(hyper, tables, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
                let mut t = Trainer::new(model, &SeedStreams::new(4));
                for batch in data.train.chunks(32).take(3) {
                    t.train_step(batch).unwrap();
                }
                let p = t.model.predict(&data.test).unwrap();
                assert_eq!(p.len(), data.test.len());
                assert!(p.iter().all(|x| (0.0..=1.0).contains(x)), "{mode}");
            }
        }
    }
}
