//! The assembled network: embeddings, graph encoder, interest routes and the
//! prediction head.
//!
//! A forward pass runs in two stages. Each sample is encoded on its own tape
//! into a `K × d` interest matrix and a context row; the batch is then
//! stacked onto one tape for the experts, confidence weights and loss.

use rand::Rng;
use rayon::prelude::*;

use crate::aggregate::{
    baseline_aggregate, confidence_weights, expert_scores, gate_weights, AggregationMode, AggregatorParams,
    AggregatorShape, BatchNormMode,
};
use crate::data::Sample;
use crate::hga::{add_positional, hga_forward, HgaParams, HgaTrace};
use crate::interest::{extract_interests, InterestParams, Pooling};
use crate::numerics::{init, Binder, ParamId, ParamStore, Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use crate::seqgraph::{build_hetero_graph, edge_dropout};
use crate::{Error, Result};

/// How the refined sequence is summarized into one context row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SummaryPooling {
    #[default]
    Mean,
    Last,
}

/// Every model and optimizer setting.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    /// Embedding width `d`.
    pub d: usize,
    /// Interest routes `K`.
    pub routes: usize,
    /// Attention heads `Φ` per graph layer.
    pub heads: usize,
    /// Graph layers `L`.
    pub layers: usize,
    /// Context window `ε`.
    pub epsilon: usize,
    /// Cosine threshold `t` for similarity edges.
    pub threshold: f64,
    /// Edge dropout rate `ρ` for the two views.
    pub rho: f64,
    /// Weight `β` of the view-agreement loss.
    pub beta: f64,
    pub n_max: usize,
    /// Hidden width `d_a` of the interest scorers.
    pub interest_hidden: usize,
    pub expert_hidden: Vec<usize>,
    pub confi_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub pooling: Pooling,
    pub summary: SummaryPooling,
    pub aggregation: AggregationMode,
    pub dha_off: bool,
    pub ssl_off: bool,
    pub single_expert: bool,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub bn_momentum: f64,
    pub batch_size: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            d: 16,
            routes: 4,
            heads: 4,
            layers: 2,
            epsilon: 3,
            threshold: 0.7,
            rho: 0.6,
            beta: 0.1,
            n_max: 20,
            interest_hidden: 16,
            expert_hidden: vec![64, 32],
            confi_hidden: vec![64, 32],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            pooling: Pooling::Softmax,
            summary: SummaryPooling::Mean,
            aggregation: AggregationMode::DemiNet,
            dha_off: false,
            ssl_off: false,
            single_expert: false,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            bn_momentum: 0.1,
            batch_size: 256,
        }
    }
}

impl HyperParams {
    /// Every violated constraint, in a stable order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.d == 0 {
            p.push("d must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            p.push(format!("d ({}) must be divisible by heads ({})", self.d, self.heads));
        }
        if self.routes == 0 {
            p.push("routes must be at least 1".into());
        }
        if self.epsilon == 0 {
            p.push("epsilon must be at least 1".into());
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            p.push(format!("threshold must lie in [-1, 1], got {}", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            p.push(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            p.push(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.n_max == 0 {
            p.push("n_max must be positive".into());
        }
        if self.interest_hidden == 0 || self.expert_hidden.contains(&0) || self.confi_hidden.contains(&0) {
            p.push("hidden widths must be positive".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            p.push(format!("leaky_slope must lie in (0, 1), got {}", self.leaky_slope));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            p.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            p.push("adam_beta1 and adam_beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            p.push("adam_eps must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            p.push("clip_norm must be positive".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            p.push("bn_momentum must lie in (0, 1]".into());
        }
        if self.batch_size == 0 {
            p.push("batch_size must be positive".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn experts(&self) -> usize {
        if self.single_expert {
            1
        } else {
            self.routes
        }
    }

    /// Width of the per-sample context row: sequence summary, target item,
    /// target category and user embeddings.
    pub fn context_width(&self) -> usize {
        4 * self.d
    }

    /// Whether training computes the two dropout views.
    pub fn uses_views(&self) -> bool {
        !self.ssl_off && !self.dha_off
    }

    /// `β` as applied; zero when the view loss is switched off.
    pub fn effective_beta(&self) -> f64 {
        if self.ssl_off {
            0.0
        } else {
            self.beta
        }
    }
}

/// Embedding table sizes, padding row included.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableSizes {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub hyper: HyperParams,
    pub tables: TableSizes,
    pub store: ParamStore,
    pub user_emb: ParamId,
    pub item_emb: ParamId,
    pub category_emb: ParamId,
    pub hga: HgaParams,
    pub interest: InterestParams,
    pub head: AggregatorParams,
}

/// Standard deviation of embedding initialization.
const EMBEDDING_STD: f64 = 0.01;

impl Model {
    pub fn new<R: Rng + ?Sized>(hyper: HyperParams, tables: TableSizes, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let d = hyper.d;
        let mut store = ParamStore::new();
        let user_emb = store.add("emb.user", init::normal(rng, EMBEDDING_STD, &[tables.users, d]), true);
        let item_emb = store.add("emb.item", init::normal(rng, EMBEDDING_STD, &[tables.items, d]), true);
        let category_emb = store.add(
            "emb.category",
            init::normal(rng, EMBEDDING_STD, &[tables.categories, d]),
            true,
        );
        let layers = if hyper.dha_off { 0 } else { hyper.layers };
        let hga = HgaParams::register(&mut store, rng, d, hyper.heads, layers, hyper.n_max)?;
        let interest = InterestParams::register(&mut store, rng, hyper.routes, d, hyper.interest_hidden);
        let experts = hyper.experts();
        let shape = AggregatorShape {
            experts,
            d,
            input_width: hyper.routes * d + hyper.context_width(),
            context_width: hyper.context_width(),
            expert_hidden: hyper.expert_hidden.clone(),
            confi_hidden: hyper.confi_hidden.clone(),
            confi_net: experts > 1 && hyper.aggregation.uses_confi_net(),
            gate: experts > 1 && hyper.aggregation == AggregationMode::Moe,
        };
        let head = AggregatorParams::register(&mut store, rng, &shape);
        Ok(Self {
            hyper,
            tables,
            store,
            user_emb,
            item_emb,
            category_emb,
            hga,
            interest,
            head,
        })
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        if s.is_empty() {
            return Err(Error::EmptySequence);
        }
        if s.len() > self.hyper.n_max {
            return Err(Error::SequenceTooLong {
                len: s.len(),
                max: self.hyper.n_max,
            });
        }
        let t = &self.tables;
        let bad = s.user >= t.users
            || s.target_item >= t.items
            || s.target_category >= t.categories
            || s.items.iter().any(|&i| i >= t.items)
            || s.categories.iter().any(|&c| c >= t.categories)
            || s.categories.len() != s.len();
        if bad {
            return Err(Error::Data(format!("sample for user {} references ids outside the vocabulary", s.user)));
        }
        Ok(())
    }

    /// Stage one for a single sample. `view_seeds` requests the two dropout
    /// views and their agreement loss.
    pub fn encode(&self, sample: &Sample, view_seeds: Option<[u64; 2]>) -> Result<Encoding> {
        self.check_sample(sample)?;
        let h = &self.hyper;
        let n = sample.len();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);

        let mut item_ids = sample.items.clone();
        item_ids.push(sample.target_item);
        let mut cat_ids = sample.categories.clone();
        cat_ids.push(sample.target_category);
        let items = binder.bind_rows(&mut tape, &self.store, self.item_emb, &item_ids)?;
        let cats = binder.bind_rows(&mut tape, &self.store, self.category_emb, &cat_ids)?;
        let user = binder.bind_rows(&mut tape, &self.store, self.user_emb, &[sample.user])?;
        let seq_items = tape.slice_rows(items, 0, n)?;
        let seq_cats = tape.slice_rows(cats, 0, n)?;
        let h0 = tape.add(seq_items, seq_cats)?;
        let target_item = tape.slice_rows(items, n, 1)?;
        let target_cat = tape.slice_rows(cats, n, 1)?;
        let target = tape.add(target_item, target_cat)?;

        let hga = self.hga.bind(&mut tape, &mut binder, &self.store);
        let interest = self.interest.bind(&mut tape, &mut binder, &self.store);
        let slope = h.leaky_slope;

        let graph = if h.dha_off {
            None
        } else {
            Some(build_hetero_graph(tape.value(h0), h.epsilon, h.threshold)?)
        };
        let (refined, trace) = match &graph {
            None => (add_positional(&mut tape, h0, hga.positional)?, None),
            Some(g) => {
                let (refined, trace) = hga_forward(&mut tape, &g.full_view(), h0, &hga, slope)?;
                (refined, Some(trace))
            }
        };
        let interests = extract_interests(&mut tape, refined, target, &interest, n, h.pooling, slope)?;

        let summary = match h.summary {
            SummaryPooling::Mean => tape.mean_rows(refined)?,
            SummaryPooling::Last => tape.slice_rows(refined, n - 1, 1)?,
        };
        let context = tape.concat_lastdim(&[summary, target_item, target_cat, user])?;

        let ssl = match (&graph, view_seeds) {
            (Some(g), Some([s1, s2])) => {
                let mut views = Vec::with_capacity(2);
                for seed in [s1, s2] {
                    let view = edge_dropout(g, h.rho, seed);
                    let (refined, _) = hga_forward(&mut tape, &view, h0, &hga, slope)?;
                    let m = extract_interests(&mut tape, refined, target, &interest, n, h.pooling, slope)?;
                    views.push(m.values);
                }
                Some(crate::training::ssl_routes(&mut tape, views[0], views[1])?)
            }
            _ => None,
        };
        Ok(Encoding {
            tape,
            binder,
            values: interests.values,
            attention: interests.attention,
            context,
            ssl,
            trace,
        })
    }

    /// Stage two: experts, weights and the click distribution for stacked
    /// `B × Kd` interests and `B × 4d` contexts.
    pub fn head_forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        interests: Var,
        context: Var,
        mode: BatchNormMode,
    ) -> Result<HeadOutput> {
        let h = &self.hyper;
        let vars = self.head.bind(tape, binder, &self.store);
        let input = tape.concat_lastdim(&[interests, context])?;
        let experts = expert_scores(tape, input, &vars.experts, vars.input_width, mode, h.leaky_slope)?;
        let logits = &experts.logits;
        let k = logits.len();

        let (probs, weights) = if k == 1 {
            (tape.softmax_lastdim(logits[0])?, None)
        } else {
            match h.aggregation {
                AggregationMode::DemiNet | AggregationMode::HardRouting => {
                    let d = h.d;
                    let routes = (0..k)
                        .map(|r| tape.slice_cols(interests, r * d, d))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    let confi = vars.confi_net.as_deref().expect("Confi-Net registered");
                    let omega = confidence_weights(tape, &routes, context, confi, vars.prototypes, h.leaky_slope)?;
                    // hard routing trains through the soft mixture and only
                    // switches to the argmax expert at inference
                    let mode_used = match (h.aggregation, mode) {
                        (AggregationMode::HardRouting, BatchNormMode::Eval) => AggregationMode::HardRouting,
                        _ => AggregationMode::DemiNet,
                    };
                    (baseline_aggregate(tape, logits, Some(omega), mode_used)?, Some(omega))
                }
                AggregationMode::MultiAvg => (baseline_aggregate(tape, logits, None, AggregationMode::MultiAvg)?, None),
                AggregationMode::Moe => {
                    let g = gate_weights(tape, context, vars.gate.expect("gate registered"))?;
                    (baseline_aggregate(tape, logits, Some(g), AggregationMode::Moe)?, Some(g))
                }
            }
        };
        Ok(HeadOutput {
            probs,
            weights,
            batch_stats: experts.batch_stats,
        })
    }

    /// Click probabilities in inference mode, in sample order.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.hyper.batch_size.max(1)) {
            let encoded: Vec<(Vec<f64>, Vec<f64>)> = chunk
                .par_iter()
                .map(|s| {
                    let e = self.encode(s, None)?;
                    Ok((e.tape.value(e.values).data().to_vec(), e.tape.value(e.context).data().to_vec()))
                })
                .collect::<Result<_>>()?;
            let (v, c) = stack(&encoded, self.hyper.routes * self.hyper.d, self.hyper.context_width())?;
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.store);
            let v = tape.constant(v);
            let c = tape.constant(c);
            let head = self.head_forward(&mut tape, &mut binder, v, c, BatchNormMode::Eval)?;
            out.extend(tape.value(head.probs).data().chunks(2).map(|p| p[1]));
        }
        Ok(out)
    }

    /// Interest vectors and route attention for one sample, inference mode.
    pub fn interests(&self, sample: &Sample) -> Result<(Tensor, Tensor)> {
        let e = self.encode(sample, None)?;
        Ok((e.tape.value(e.values).clone(), e.tape.value(e.attention).clone()))
    }
}

/// Stacks per-sample rows into `B × a` and `B × b` tensors.
pub(crate) fn stack(rows: &[(Vec<f64>, Vec<f64>)], a: usize, b: usize) -> Result<(Tensor, Tensor)> {
    let mut left = Vec::with_capacity(rows.len() * a);
    let mut right = Vec::with_capacity(rows.len() * b);
    for (l, r) in rows {
        left.extend_from_slice(l);
        right.extend_from_slice(r);
    }
    Ok((
        Tensor::new(vec![rows.len(), a], left)?,
        Tensor::new(vec![rows.len(), b], right)?,
    ))
}

/// Stage-one result for one sample, with its tape kept for the backward
/// pass.
pub struct Encoding {
    pub tape: Tape,
    pub binder: Binder,
    /// `K × d`
    pub values: Var,
    /// `K × n`
    pub attention: Var,
    /// `1 × 4d`
    pub context: Var,
    /// Per-route view disagreement, `K × 1`.
    pub ssl: Option<Var>,
    /// Attention of the undropped graph pass; absent without graph layers.
    pub trace: Option<HgaTrace>,
}

pub struct HeadOutput {
    /// `B × 2`; column 1 is the click probability.
    pub probs: Var,
    /// Confidence or gate weights, `B × K_e`, when the mode has them.
    pub weights: Option<Var>,
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}
