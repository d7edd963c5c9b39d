//! Interest experts, Confi-Net confidence weights, and the aggregators that
//! combine per-expert click logits into one prediction.
//!
//! Everything here works on batches: row `b` of every tensor belongs to
//! sample `b`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::numerics::{init, Binder, NumericsError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Tolerance on `Σω = 1` before aggregation.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

/// Stack of dense layers with LeakyReLU between them and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// `dims` lists every width from input to output.
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    store.add(format!("{prefix}.W{}", i + 1), init::glorot_uniform(rng, w[0], w[1]), true),
                    store.add(format!("{prefix}.b{}", i + 1), Tensor::zeros(vec![w[1]]), true),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder, store: &ParamStore) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|&(w, b)| (binder.bind(tape, store, w), binder.bind(tape, store, b)))
            .collect()
    }
}

pub fn mlp_forward(tape: &mut Tape, x: Var, layers: &[(Var, Var)], slope: f64) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = tape.dense(h, w, b)?;
        if i + 1 < layers.len() {
            h = tape.leaky_relu(h, slope)?;
        }
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct ExpertParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Non-trainable running statistics.
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mlp: Mlp,
}

/// Prediction head: experts, prototypes, Confi-Net and the optional MoE gate.
#[derive(Clone, Debug)]
pub struct AggregatorParams {
    pub experts: Vec<ExpertParams>,
    /// `K_e × d`
    pub prototypes: ParamId,
    pub confi_net: Option<Mlp>,
    /// Single dense layer from the context to `K_e` gate logits.
    pub gate: Option<(ParamId, ParamId)>,
    pub d: usize,
    pub input_width: usize,
}

#[derive(Clone, Debug)]
pub struct AggregatorShape {
    pub experts: usize,
    pub d: usize,
    /// Width of the expert input `[flatten(V) ‖ context]`.
    pub input_width: usize,
    /// Width of the context vector alone.
    pub context_width: usize,
    pub expert_hidden: Vec<usize>,
    pub confi_hidden: Vec<usize>,
    pub confi_net: bool,
    pub gate: bool,
}

impl AggregatorParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, shape: &AggregatorShape) -> Self {
        let w = shape.input_width;
        let experts = (0..shape.experts)
            .map(|k| {
                let prefix = format!("expert{k}");
                let mut dims = vec![w];
                dims.extend(&shape.expert_hidden);
                dims.push(2);
                ExpertParams {
                    gamma: store.add(format!("{prefix}.bn.gamma"), Tensor::filled(vec![w], 1.0), true),
                    beta: store.add(format!("{prefix}.bn.beta"), Tensor::zeros(vec![w]), true),
                    running_mean: store.add(format!("{prefix}.bn.running_mean"), Tensor::zeros(vec![w]), false),
                    running_var: store.add(format!("{prefix}.bn.running_var"), Tensor::filled(vec![w], 1.0), false),
                    mlp: Mlp::register(store, rng, &format!("{prefix}.mlp"), &dims),
                }
            })
            .collect();
        let prototypes = store.add("prototypes", init::glorot_uniform(rng, shape.experts, shape.d), true);
        let confi_net = shape.confi_net.then(|| {
            let mut dims = vec![shape.d + shape.context_width];
            dims.extend(&shape.confi_hidden);
            dims.push(shape.d);
            Mlp::register(store, rng, "confi", &dims)
        });
        let gate = shape.gate.then(|| {
            (
                store.add("gate.W", init::glorot_uniform(rng, shape.context_width, shape.experts), true),
                store.add("gate.b", Tensor::zeros(vec![shape.experts]), true),
            )
        });
        Self {
            experts,
            prototypes,
            confi_net,
            gate,
            d: shape.d,
            input_width: w,
        }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder, store: &ParamStore) -> AggregatorVars {
        AggregatorVars {
            experts: self
                .experts
                .iter()
                .map(|e| ExpertVars {
                    gamma: binder.bind(tape, store, e.gamma),
                    beta: binder.bind(tape, store, e.beta),
                    running_mean: store.get(e.running_mean).data().to_vec(),
                    running_var: store.get(e.running_var).data().to_vec(),
                    mlp: e.mlp.bind(tape, binder, store),
                })
                .collect(),
            prototypes: binder.bind(tape, store, self.prototypes),
            confi_net: self.confi_net.as_ref().map(|m| m.bind(tape, binder, store)),
            gate: self
                .gate
                .map(|(w, b)| (binder.bind(tape, store, w), binder.bind(tape, store, b))),
            input_width: self.input_width,
        }
    }

    /// Folds batch statistics into the running buffers.
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &[(Vec<f64>, Vec<f64>)], momentum: f64) {
        for (e, (mean, var)) in self.experts.iter().zip(stats) {
            for (r, m) in store.get_mut(e.running_mean).data_mut().iter_mut().zip(mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            for (r, v) in store.get_mut(e.running_var).data_mut().iter_mut().zip(var) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExpertVars {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub mlp: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct AggregatorVars {
    pub experts: Vec<ExpertVars>,
    pub prototypes: Var,
    pub confi_net: Option<Vec<(Var, Var)>>,
    pub gate: Option<(Var, Var)>,
    pub input_width: usize,
}

#[derive(Clone, Debug)]
pub struct ExpertOutputs {
    /// One `B × 2` logit block per expert.
    pub logits: Vec<Var>,
    /// Per-expert batch mean and variance in train mode; empty in eval mode.
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

pub const BATCHNORM_EPS: f64 = 1e-5;

/// Runs every expert on the shared input `B × input_width`.
pub fn expert_scores(
    tape: &mut Tape,
    input: Var,
    experts: &[ExpertVars],
    input_width: usize,
    mode: BatchNormMode,
    slope: f64,
) -> Result<ExpertOutputs> {
    let width = tape.value(input).cols();
    if width != input_width {
        return Err(NumericsError::Shape {
            op: "expert_scores",
            lhs: tape.value(input).shape().to_vec(),
            rhs: vec![input_width],
        }
        .into());
    }
    let mut out = ExpertOutputs {
        logits: Vec::with_capacity(experts.len()),
        batch_stats: Vec::new(),
    };
    for e in experts {
        let normed = match mode {
            BatchNormMode::Train => {
                let (y, mean, var) = tape.batchnorm_train(input, e.gamma, e.beta, BATCHNORM_EPS)?;
                out.batch_stats.push((mean, var));
                y
            }
            BatchNormMode::Eval => {
                tape.batchnorm_eval(input, e.gamma, e.beta, &e.running_mean, &e.running_var, BATCHNORM_EPS)?
            }
        };
        out.logits.push(mlp_forward(tape, normed, &e.mlp, slope)?);
    }
    Ok(out)
}

/// `ω = softmax_k(c_k · p_k / √d)` with `c_k = ConfiNet([v_k ‖ context])`.
///
/// `routes` holds one `B × d` block per expert, `context` is `B × c`, and
/// `prototypes` is `K × d`. Returns `B × K`.
pub fn confidence_weights(
    tape: &mut Tape,
    routes: &[Var],
    context: Var,
    confi_net: &[(Var, Var)],
    prototypes: Var,
    slope: f64,
) -> Result<Var> {
    let k = routes.len();
    let b = tape.value(context).rows();
    let d = tape.value(prototypes).cols();
    let mut inputs = Vec::with_capacity(k);
    for &v in routes {
        inputs.push(tape.concat_lastdim(&[v, context])?);
    }
    // one pass of the shared network over all routes stacked by rows
    let stacked = if k == 1 { inputs[0] } else { tape.concat_rows(&inputs)? };
    let combos = mlp_forward(tape, stacked, confi_net, slope)?;
    let mut scores = Vec::with_capacity(k);
    for r in 0..k {
        let c = if k == 1 { combos } else { tape.slice_rows(combos, r * b, b)? };
        let p = tape.slice_rows(prototypes, r, 1)?;
        let p = if b == 1 { p } else { tape.repeat_rows(p, b)? };
        let prod = tape.mul(c, p)?;
        let dot = tape.sum_lastdim(prod)?;
        scores.push(tape.scale(dot, 1.0 / (d as f64).sqrt())?);
    }
    let logits = if k == 1 { scores[0] } else { tape.concat_lastdim(&scores)? };
    Ok(tape.softmax_lastdim(logits)?)
}

fn check_weight_rows(weights: &Tensor, experts: usize) -> Result<()> {
    if weights.cols() != experts {
        return Err(NumericsError::Contract(format!(
            "{} weights for {experts} experts",
            weights.cols()
        ))
        .into());
    }
    for (b, row) in weights.data().chunks(experts).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(NumericsError::Contract(format!("expert weights of row {b} sum to {s}")).into());
        }
    }
    Ok(())
}

/// `ŷ = softmax(Σ_k ω_k o_k)` for `B × K` weights and `K` logit blocks.
pub fn aggregate_predict(tape: &mut Tape, logits: &[Var], weights: Var) -> Result<Var> {
    check_weight_rows(tape.value(weights), logits.len())?;
    let mixed = weighted_sum(tape, logits, weights)?;
    Ok(tape.softmax_lastdim(mixed)?)
}

fn weighted_sum(tape: &mut Tape, blocks: &[Var], weights: Var) -> Result<Var> {
    let mut acc = None;
    for (k, &o) in blocks.iter().enumerate() {
        let w = tape.slice_cols(weights, k, 1)?;
        let term = tape.mul_col(o, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one expert"))
}

/// How expert logits become the final prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AggregationMode {
    #[default]
    DemiNet,
    MultiAvg,
    HardRouting,
    Moe,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 4] = [Self::DemiNet, Self::MultiAvg, Self::HardRouting, Self::Moe];

    pub fn name(self) -> &'static str {
        match self {
            Self::DemiNet => "deminet",
            Self::MultiAvg => "multi_avg",
            Self::HardRouting => "hard_routing",
            Self::Moe => "moe",
        }
    }

    pub fn uses_confi_net(self) -> bool {
        matches!(self, Self::DemiNet | Self::HardRouting)
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown aggregation mode {s:?}")))
    }
}

/// Index of the largest weight; ties go to the lowest index.
pub fn argmax_lowest(weights: &[f64]) -> usize {
    let mut best = 0;
    for (i, &w) in weights.iter().enumerate().skip(1) {
        if w > weights[best] {
            best = i;
        }
    }
    best
}

/// Alternative aggregators.
///
/// `weights` are the Confi-Net weights for `hard_routing` and the gate
/// probabilities for `moe`; `multi_avg` ignores them. `deminet` defers to
/// [`aggregate_predict`].
pub fn baseline_aggregate(
    tape: &mut Tape,
    logits: &[Var],
    weights: Option<Var>,
    mode: AggregationMode,
) -> Result<Var> {
    let k = logits.len();
    let need = |w: Option<Var>| w.ok_or_else(|| Error::config(format!("{mode} aggregation needs weights")));
    match mode {
        AggregationMode::DemiNet => aggregate_predict(tape, logits, need(weights)?),
        AggregationMode::MultiAvg => {
            let mut acc = logits[0];
            for &o in &logits[1..] {
                acc = tape.add(acc, o)?;
            }
            let mean = tape.scale(acc, 1.0 / k as f64)?;
            Ok(tape.softmax_lastdim(mean)?)
        }
        AggregationMode::HardRouting => {
            let w = need(weights)?;
            check_weight_rows(tape.value(w), k)?;
            let rows = tape.value(w).rows();
            let mut onehot = vec![0.0; rows * k];
            for (b, row) in tape.value(w).data().chunks(k).enumerate() {
                onehot[b * k + argmax_lowest(row)] = 1.0;
            }
            let selector = tape.constant(Tensor::new(vec![rows, k], onehot)?);
            mix_probabilities(tape, logits, selector)
        }
        AggregationMode::Moe => {
            let w = need(weights)?;
            check_weight_rows(tape.value(w), k)?;
            mix_probabilities(tape, logits, w)
        }
    }
}

fn mix_probabilities(tape: &mut Tape, logits: &[Var], weights: Var) -> Result<Var> {
    let mut probs = Vec::with_capacity(logits.len());
    for &o in logits {
        probs.push(tape.softmax_lastdim(o)?);
    }
    weighted_sum(tape, &probs, weights)
}

/// MoE gate probabilities `softmax(context · W + b)`, `B × K`.
pub fn gate_weights(tape: &mut Tape, context: Var, gate: (Var, Var)) -> Result<Var> {
    let z = tape.dense(context, gate.0, gate.1)?;
    Ok(tape.softmax_lastdim(z)?)
}
