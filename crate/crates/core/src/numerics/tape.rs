//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to compute the vector-Jacobian product later. `Var` handles index
//! into the arena, so nodes can only reference earlier nodes and the arena is
//! topologically ordered by construction.

use std::sync::Arc;

use super::{Adjacency, NumericsError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumLastdim(Var),
    MeanRows(Var),
    ConcatLastdim(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GraphAttend {
        self_score: Var,
        nbr_score: Var,
        values: Var,
        adj: Arc<Adjacency>,
        slope: f64,
        pre: Vec<f64>,
        alpha: Vec<f64>,
    },
    BinaryCrossEntropy {
        probs: Var,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Arena of recorded operations for one forward/backward pass.
///
/// A tape is confined to a single worker. Gradients live on the tape and are
/// discarded with it; callers copy what they need into their own buffers.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Same as [`Tape::grad`] but shaped like the value, zeros when absent.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }

    /// Per-edge attention coefficients saved by a graph-attention node, in
    /// the adjacency's edge order.
    pub fn attention_coefficients(&self, v: Var) -> Option<(&Adjacency, &[f64])> {
        match &self.nodes[v.0].op {
            Op::GraphAttend { adj, alpha, .. } => Some((adj.as_ref(), alpha.as_slice())),
            _ => None,
        }
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, NumericsError> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Clears gradients from a previous `backward` call.
    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Computes d(loss)/d(node) for every node that requires a gradient.
    ///
    /// Gradients add across fan-out. Leaf gradients also accumulate across
    /// repeated calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let previous = std::mem::take(&mut self.grads);
        self.grads = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(vec![1.0]);
            let Tape { nodes, grads } = self;
            for i in (0..=loss.0).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &nodes[i];
                if node.requires_grad {
                    propagate(nodes, grads, node, &g);
                }
                grads[i] = Some(g);
            }
        }
        // leaves keep accumulating across calls; intermediates are per call
        for (i, prev) in previous.into_iter().enumerate() {
            let Some(prev) = prev else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            match &mut self.grads[i] {
                Some(g) => add_into(g, &prev),
                slot @ None => *slot = Some(prev),
            }
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                let bd = bv.data();
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let bp = &bd[p * n..(p + 1) * n];
                        da[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                let ad = av.data();
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                            *d += aip * gv;
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                add_into(db, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for (d, gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gv), y) in da.iter_mut().zip(g).zip(bd) {
                    *d += gv * y;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, gv), x) in db.iter_mut().zip(g).zip(ad) {
                    *d += gv * x;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += c * gv;
                }
            }
        }
        Op::AddRow(a, b) => {
            let cols = out.cols();
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for row in g.chunks(cols) {
                    add_into(db, row);
                }
            }
        }
        Op::MulCol(a, c) => {
            let cols = out.cols();
            let (ad, cd) = (val(*a).data(), val(*c).data());
            if let Some(da) = slot(nodes, grads, *a) {
                for (r, (drow, grow)) in da.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                    for (d, gv) in drow.iter_mut().zip(grow) {
                        *d += gv * cd[r];
                    }
                }
            }
            if let Some(dc) = slot(nodes, grads, *c) {
                for (r, (arow, grow)) in ad.chunks(cols).zip(g.chunks(cols)).enumerate() {
                    dc[r] += arow.iter().zip(grow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        Op::LeakyRelu(a, slope) => {
            let ad = val(*a).data();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gv), x) in da.iter_mut().zip(g).zip(ad) {
                    *d += if *x >= 0.0 { *gv } else { slope * gv };
                }
            }
        }
        Op::Softmax(a) => {
            let cols = out.cols();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((drow, grow), yrow) in da
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (gv - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let cols = out.cols();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((drow, grow), yrow) in da
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.data().chunks(cols))
                {
                    let total: f64 = grow.iter().sum();
                    for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += gv - y.exp() * total;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                let scale = g[0] / da.len() as f64;
                da.iter_mut().for_each(|d| *d += scale);
            }
        }
        Op::SumLastdim(a) => {
            let cols = val(*a).cols();
            if let Some(da) = slot(nodes, grads, *a) {
                for (drow, gv) in da.chunks_mut(cols).zip(g) {
                    drow.iter_mut().for_each(|d| *d += gv);
                }
            }
        }
        Op::MeanRows(a) => {
            let (rows, cols) = (val(*a).rows(), val(*a).cols());
            if let Some(da) = slot(nodes, grads, *a) {
                let inv = 1.0 / rows as f64;
                for drow in da.chunks_mut(cols) {
                    for (d, gv) in drow.iter_mut().zip(g) {
                        *d += gv * inv;
                    }
                }
            }
        }
        Op::ConcatLastdim(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for p in parts {
                let c = val(*p).cols();
                if let Some(dp) = slot(nodes, grads, *p) {
                    for (drow, grow) in dp.chunks_mut(c).zip(g.chunks(total)) {
                        add_into(drow, &grow[offset..offset + c]);
                    }
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).numel();
                if let Some(dp) = slot(nodes, grads, *p) {
                    add_into(dp, &g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::SliceCols(a, start) => {
            let (src_cols, len) = (val(*a).cols(), out.cols());
            if let Some(da) = slot(nodes, grads, *a) {
                for (drow, grow) in da.chunks_mut(src_cols).zip(g.chunks(len)) {
                    add_into(&mut drow[*start..start + len], grow);
                }
            }
        }
        Op::SliceRows(a, start) => {
            let cols = out.cols();
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(&mut da[start * cols..start * cols + g.len()], g);
            }
        }
        Op::GatherRows(t, idx) => {
            let cols = out.cols();
            if let Some(dt) = slot(nodes, grads, *t) {
                for (&r, grow) in idx.iter().zip(g.chunks(cols)) {
                    add_into(&mut dt[r * cols..(r + 1) * cols], grow);
                }
            }
        }
        Op::RepeatRows(a) => {
            let cols = out.cols();
            if let Some(da) = slot(nodes, grads, *a) {
                for grow in g.chunks(cols) {
                    add_into(da, grow);
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let cols = out.cols();
            let rows = out.rows();
            let gam = val(*gamma).data();
            if let Some(db) = slot(nodes, grads, *beta) {
                for grow in g.chunks(cols) {
                    add_into(db, grow);
                }
            }
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for ((d, gv), h) in dg.iter_mut().zip(grow).zip(hrow) {
                        *d += gv * h;
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                if *batch_stats {
                    let b = rows as f64;
                    let mut sum_dh = vec![0.0; cols];
                    let mut sum_dh_h = vec![0.0; cols];
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            let dh = grow[c] * gam[c];
                            sum_dh[c] += dh;
                            sum_dh_h[c] += dh * hrow[c];
                        }
                    }
                    for ((drow, grow), hrow) in dx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                    {
                        for c in 0..cols {
                            let dh = grow[c] * gam[c];
                            drow[c] += inv_std[c] / b * (b * dh - sum_dh[c] - hrow[c] * sum_dh_h[c]);
                        }
                    }
                } else {
                    for (drow, grow) in dx.chunks_mut(cols).zip(g.chunks(cols)) {
                        for c in 0..cols {
                            drow[c] += grow[c] * gam[c] * inv_std[c];
                        }
                    }
                }
            }
        }
        Op::GraphAttend {
            self_score,
            nbr_score,
            values,
            adj,
            slope,
            pre,
            alpha,
        } => {
            let hv = val(*values);
            let dh = hv.cols();
            let hd = hv.data();
            let n = adj.node_count();
            // d(loss)/d(pre-activation logit) per edge
            let mut dpre = vec![0.0; alpha.len()];
            let mut dvals = vec![0.0; hd.len()];
            for i in 0..n {
                let range = adj.edge_range(i);
                if range.is_empty() {
                    continue;
                }
                let gi = &g[i * dh..(i + 1) * dh];
                let mut weighted = 0.0;
                for e in range.clone() {
                    let j = adj.sources()[e];
                    let dalpha: f64 = gi.iter().zip(&hd[j * dh..(j + 1) * dh]).map(|(x, y)| x * y).sum();
                    dpre[e] = dalpha;
                    weighted += alpha[e] * dalpha;
                    for (d, gv) in dvals[j * dh..(j + 1) * dh].iter_mut().zip(gi) {
                        *d += alpha[e] * gv;
                    }
                }
                for e in range {
                    let da = alpha[e] * (dpre[e] - weighted);
                    dpre[e] = if pre[e] >= 0.0 { da } else { slope * da };
                }
            }
            if let Some(dv) = slot(nodes, grads, *values) {
                add_into(dv, &dvals);
            }
            if let Some(ds) = slot(nodes, grads, *self_score) {
                for i in 0..n {
                    for e in adj.edge_range(i) {
                        ds[i] += dpre[e];
                    }
                }
            }
            if let Some(dt) = slot(nodes, grads, *nbr_score) {
                for (e, &j) in adj.sources().iter().enumerate() {
                    dt[j] += dpre[e];
                }
            }
        }
        Op::BinaryCrossEntropy { probs, labels } => {
            let pd = val(*probs).data();
            let m = labels.len() as f64;
            if let Some(dp) = slot(nodes, grads, *probs) {
                for ((d, &p), &y) in dp.iter_mut().zip(pd).zip(labels) {
                    if p <= super::PROB_CLAMP || p >= 1.0 - super::PROB_CLAMP {
                        continue;
                    }
                    *d += g[0] * (-y / p + (1.0 - y) / (1.0 - p)) / m;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
