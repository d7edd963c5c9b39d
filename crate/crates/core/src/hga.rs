//! Hierarchical heterogeneous graph attention.
//!
//! Each layer splits the `d`-wide node embeddings into `Φ` disjoint heads.
//! Within a head, every relation first aggregates its in-neighbors with
//! GAT-style attention (node level), then the per-relation results are
//! fused by a softmax over relations (dependency level). Heads are
//! concatenated back to width `d`, so stacked layers keep their width. The
//! trainable positional table is added after the last layer.

use std::sync::Arc;

use rand::Rng;

use crate::numerics::{init, Adjacency, Binder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::seqgraph::{GraphView, Relation};
use crate::{Error, Result};

/// Parameter handles for one attention layer.
#[derive(Clone, Debug)]
pub struct HgaLayerParams {
    /// `[head][relation]`, each `2·d_h × 1`: the first half scores the
    /// receiving node, the second half the neighbor.
    pub node_weights: Vec<[ParamId; 4]>,
    /// Per head, `d_h × 1`.
    pub dep_weights: Vec<ParamId>,
    /// Per head, scalar bias.
    pub dep_bias: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct HgaParams {
    pub layers: Vec<HgaLayerParams>,
    /// `n_max × d` positional embedding table.
    pub positional: ParamId,
    pub d: usize,
    pub heads: usize,
}

impl HgaParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        d: usize,
        heads: usize,
        layers: usize,
        n_max: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "embedding width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let layers = (0..layers)
            .map(|l| {
                let mut node_weights = Vec::with_capacity(heads);
                let mut dep_weights = Vec::with_capacity(heads);
                let mut dep_bias = Vec::with_capacity(heads);
                for h in 0..heads {
                    node_weights.push(Relation::ALL.map(|rel| {
                        store.add(
                            format!("hga.layer{l}.{}.head{h}.Wn", rel.name()),
                            init::glorot_uniform(rng, 2 * dh, 1),
                            true,
                        )
                    }));
                    dep_weights.push(store.add(
                        format!("hga.layer{l}.head{h}.Wd"),
                        init::glorot_uniform(rng, dh, 1),
                        true,
                    ));
                    dep_bias.push(store.add(format!("hga.layer{l}.head{h}.bd"), Tensor::zeros(vec![1]), true));
                }
                HgaLayerParams {
                    node_weights,
                    dep_weights,
                    dep_bias,
                }
            })
            .collect();
        let positional = store.add("hga.positional", init::normal(rng, 0.01, &[n_max, d]), true);
        Ok(Self {
            layers,
            positional,
            d,
            heads,
        })
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut Binder, store: &ParamStore) -> HgaVars {
        let layers = self
            .layers
            .iter()
            .map(|l| HgaLayerVars {
                node_weights: l
                    .node_weights
                    .iter()
                    .map(|ids| ids.map(|id| binder.bind(tape, store, id)))
                    .collect(),
                dep_weights: l.dep_weights.iter().map(|&id| binder.bind(tape, store, id)).collect(),
                dep_bias: l.dep_bias.iter().map(|&id| binder.bind(tape, store, id)).collect(),
            })
            .collect();
        HgaVars {
            layers,
            positional: binder.bind(tape, store, self.positional),
            d: self.d,
            heads: self.heads,
        }
    }
}

/// Layer parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct HgaLayerVars {
    pub node_weights: Vec<[Var; 4]>,
    pub dep_weights: Vec<Var>,
    pub dep_bias: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct HgaVars {
    pub layers: Vec<HgaLayerVars>,
    pub positional: Var,
    pub d: usize,
    pub heads: usize,
}

/// Node-level attention for one relation and head.
///
/// `h` is `n × d_h`, `weights` is `2·d_h × 1`. Node `i` receives
/// `Σ_j α_ij h_j` over its in-neighbors, with
/// `α_i· = softmax_j(LeakyReLU(w · [h_i ‖ h_j]))`. Nodes without in-neighbors
/// under this relation get a zero row.
pub fn inter_node_attention(
    tape: &mut Tape,
    adj: Arc<Adjacency>,
    h: Var,
    weights: Var,
    slope: f64,
) -> Result<Var> {
    let dh = tape.value(h).cols();
    let w_self = tape.slice_rows(weights, 0, dh)?;
    let w_nbr = tape.slice_rows(weights, dh, dh)?;
    let self_score = tape.matmul(h, w_self)?;
    let nbr_score = tape.matmul(h, w_nbr)?;
    Ok(tape.graph_attend(self_score, nbr_score, h, adj, slope)?)
}

/// Output of the dependency-level fusion for one head.
#[derive(Clone, Copy, Debug)]
pub struct DependencyAttention {
    pub output: Var,
    /// `n × 4` relation weights; masked relations are exactly zero.
    pub weights: Var,
}

/// Fuses the four relation-specific embeddings of one head.
///
/// `present[i * 4 + r]` says whether node `i` has any in-neighbor under
/// relation `r`; absent relations are masked out of the softmax.
pub fn inter_dependency_attention(
    tape: &mut Tape,
    deps: &[Var; 4],
    present: &[bool],
    weight: Var,
    bias: Var,
    slope: f64,
) -> Result<DependencyAttention> {
    let n = tape.value(deps[0]).rows();
    debug_assert_eq!(present.len(), n * 4);
    assert!(
        present.chunks(4).all(|row| row.iter().any(|&p| p)),
        "every node needs at least one relation with in-neighbors"
    );
    let mut scores = Vec::with_capacity(4);
    for &dep in deps {
        let proj = tape.matmul(dep, weight)?;
        let biased = tape.add_row(proj, bias)?;
        scores.push(tape.leaky_relu(biased, slope)?);
    }
    let stacked = tape.concat_lastdim(&scores)?;
    let weights = tape.masked_softmax_lastdim(stacked, present)?;
    let mut output = None;
    for (r, &dep) in deps.iter().enumerate() {
        if !present.chunks(4).any(|row| row[r]) {
            continue;
        }
        let beta = tape.slice_cols(weights, r, 1)?;
        let term = tape.mul_col(dep, beta)?;
        output = Some(match output {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(DependencyAttention {
        output: output.expect("self relation is always present"),
        weights,
    })
}

/// Intermediate handles kept for inspection.
#[derive(Clone, Debug, Default)]
pub struct HgaTrace {
    /// Graph-attention nodes; query with [`Tape::attention_coefficients`].
    pub node_attention: Vec<Var>,
    /// `n × 4` dependency weights per layer and head.
    pub dependency_weights: Vec<Var>,
    /// Relation presence mask shared by all layers.
    pub present: Vec<bool>,
}

/// Runs every layer over `view` starting from the `n × d` embeddings `h0`
/// and adds positional rows `0..n`.
pub fn hga_forward(
    tape: &mut Tape,
    view: &GraphView<'_>,
    h0: Var,
    vars: &HgaVars,
    slope: f64,
) -> Result<(Var, HgaTrace)> {
    let n = view.node_count();
    let (rows, cols) = (tape.value(h0).rows(), tape.value(h0).cols());
    if rows != n || cols != vars.d {
        return Err(Error::Data(format!(
            "node embeddings are {rows}×{cols}, graph has {n} nodes of width {}",
            vars.d
        )));
    }
    let adjs = view.adjacencies();
    let present: Vec<bool> = (0..n)
        .flat_map(|i| adjs.iter().map(move |a| a.in_degree(i) > 0))
        .collect();
    let mut trace = HgaTrace {
        present: present.clone(),
        ..Default::default()
    };
    let dh = vars.d / vars.heads;
    let mut h = h0;
    for layer in &vars.layers {
        let mut head_out = Vec::with_capacity(vars.heads);
        for head in 0..vars.heads {
            let hh = if vars.heads == 1 { h } else { tape.slice_cols(h, head * dh, dh)? };
            let mut deps = [hh; 4];
            for rel in Relation::ALL {
                let r = rel.index();
                deps[r] = inter_node_attention(
                    tape,
                    adjs[r].clone(),
                    hh,
                    layer.node_weights[head][r],
                    slope,
                )?;
                trace.node_attention.push(deps[r]);
            }
            let fused = inter_dependency_attention(
                tape,
                &deps,
                &present,
                layer.dep_weights[head],
                layer.dep_bias[head],
                slope,
            )?;
            trace.dependency_weights.push(fused.weights);
            head_out.push(fused.output);
        }
        h = if head_out.len() == 1 { head_out[0] } else { tape.concat_lastdim(&head_out)? };
    }
    let out = add_positional(tape, h, vars.positional)?;
    Ok((out, trace))
}

/// `h + positional[0..n]`.
pub fn add_positional(tape: &mut Tape, h: Var, positional: Var) -> Result<Var> {
    let n = tape.value(h).rows();
    let max = tape.value(positional).rows();
    if n > max {
        return Err(Error::SequenceTooLong { len: n, max });
    }
    let pos = tape.slice_rows(positional, 0, n)?;
    Ok(tape.add(h, pos)?)
}
