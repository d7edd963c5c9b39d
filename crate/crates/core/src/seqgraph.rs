//! Per-sequence heterogeneous graphs and their edge-dropout views.
//!
//! One node per sequence position. Edges are directed `(source, dest)`
//! pairs; a node aggregates messages from the sources of its incoming edges.
//! Four relations:
//!
//! * `In`: from each of the `ε` preceding positions,
//! * `Out`: from each of the `ε` following positions,
//! * `Sim`: both directions between positions whose embeddings have cosine
//!   similarity `≥ t`,
//! * `SelfLoop`: every node to itself.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Adjacency, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    In,
    Out,
    Sim,
    SelfLoop,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::In, Relation::Out, Relation::Sim, Relation::SelfLoop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::In => "in",
            Relation::Out => "out",
            Relation::Sim => "sim",
            Relation::SelfLoop => "self",
        }
    }
}

/// Directed `(source, dest)` pair.
pub type Edge = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeteroGraph {
    n: usize,
    edges: [Vec<Edge>; 4],
}

impl HeteroGraph {
    /// Assembles a graph from explicit edge lists, checking indices and that
    /// the self relation is exactly the set of self-loops.
    pub fn from_edges(n: usize, edges: [Vec<Edge>; 4]) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        for (rel, list) in Relation::ALL.iter().zip(&edges) {
            if let Some(&(s, d)) = list.iter().find(|&&(s, d)| s >= n || d >= n) {
                return Err(Error::Data(format!(
                    "{} edge ({s}, {d}) outside {n} nodes",
                    rel.name()
                )));
            }
        }
        let selfs: BTreeSet<Edge> = edges[Relation::SelfLoop.index()].iter().copied().collect();
        if selfs != (0..n).map(|i| (i, i)).collect() {
            return Err(Error::Data("self relation must hold exactly one loop per node".into()));
        }
        Ok(Self { n, edges })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self, rel: Relation) -> &[Edge] {
        &self.edges[rel.index()]
    }

    pub fn edge_set(&self, rel: Relation) -> BTreeSet<Edge> {
        self.edges(rel).iter().copied().collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// View that retains every edge.
    pub fn full_view(&self) -> GraphView<'_> {
        GraphView {
            base: self,
            retained: self.edges.clone(),
        }
    }

    /// Text adjacency listing, one `relation source dest` triple per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for rel in Relation::ALL {
            for &(s, d) in self.edges(rel) {
                let _ = writeln!(out, "{}\t{s}\t{d}", rel.name());
            }
        }
        out
    }
}

/// A graph with a subset of its edges retained.
#[derive(Clone, Debug)]
pub struct GraphView<'a> {
    base: &'a HeteroGraph,
    retained: [Vec<Edge>; 4],
}

impl<'a> GraphView<'a> {
    /// Builds a view from explicit per-relation edge lists; every retained
    /// edge must exist in `base` and all self-loops must be kept.
    pub fn new(base: &'a HeteroGraph, retained: [Vec<Edge>; 4]) -> Result<Self> {
        for rel in Relation::ALL {
            let all = base.edge_set(rel);
            if retained[rel.index()].iter().any(|e| !all.contains(e)) {
                return Err(Error::Data(format!(
                    "view keeps a {} edge absent from the base graph",
                    rel.name()
                )));
            }
        }
        let selfs: BTreeSet<Edge> = retained[Relation::SelfLoop.index()].iter().copied().collect();
        if selfs.len() != base.n {
            return Err(Error::Data("views must keep every self-loop".into()));
        }
        Ok(Self { base, retained })
    }

    pub fn base(&self) -> &HeteroGraph {
        self.base
    }

    pub fn node_count(&self) -> usize {
        self.base.n
    }

    pub fn edges(&self, rel: Relation) -> &[Edge] {
        &self.retained[rel.index()]
    }

    pub fn edge_set(&self, rel: Relation) -> BTreeSet<Edge> {
        self.edges(rel).iter().copied().collect()
    }

    pub fn edge_count(&self) -> usize {
        self.retained.iter().map(Vec::len).sum()
    }

    pub fn adjacency(&self, rel: Relation) -> Adjacency {
        Adjacency::from_edges(self.base.n, self.edges(rel))
    }

    /// Incoming adjacency for every relation, indexed by `Relation::index`.
    pub fn adjacencies(&self) -> [Arc<Adjacency>; 4] {
        Relation::ALL.map(|rel| Arc::new(self.adjacency(rel)))
    }
}

/// Cosine similarity; zero when either vector has norm below `1e-12`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine similarity of unequal lengths");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Builds the four-relation graph for one sequence from its `n × d` initial
/// embeddings. The similarity relation is decided once, from these rows.
pub fn build_hetero_graph(seq: &Tensor, epsilon: usize, threshold: f64) -> Result<HeteroGraph> {
    if epsilon == 0 {
        return Err(Error::config("context window epsilon must be at least 1"));
    }
    let n = seq.rows();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let mut incoming = Vec::new();
    let mut outgoing = Vec::new();
    let mut sim = Vec::new();
    for i in 0..n {
        for j in i.saturating_sub(epsilon)..i {
            incoming.push((j, i));
        }
        for j in i + 1..=(i + epsilon).min(n - 1) {
            outgoing.push((j, i));
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if cosine_similarity(seq.row_slice(i), seq.row_slice(j)) >= threshold {
                sim.push((i, j));
                sim.push((j, i));
            }
        }
    }
    let selfs = (0..n).map(|i| (i, i)).collect();
    Ok(HeteroGraph {
        n,
        edges: [incoming, outgoing, sim, selfs],
    })
}

/// Independently keeps each contextual and similarity edge with probability
/// `1 - rho`; self-loops are always kept. Deterministic in `seed`.
pub fn edge_dropout(g: &HeteroGraph, rho: f64, seed: u64) -> GraphView<'_> {
    assert!((0.0..=1.0).contains(&rho), "dropout ratio {rho} outside [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rho;
    let mut retained: [Vec<Edge>; 4] = Default::default();
    for rel in [Relation::In, Relation::Out, Relation::Sim] {
        retained[rel.index()] = g
            .edges(rel)
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < keep)
            .collect();
    }
    retained[Relation::SelfLoop.index()] = g.edges(Relation::SelfLoop).to_vec();
    GraphView { base: g, retained }
}

/// Literal O(n²) enumeration of every ordered node pair against each
/// relation's membership rule. Serves as a reference for
/// [`build_hetero_graph`].
pub fn brute_force_graph_oracle(seq: &Tensor, epsilon: usize, threshold: f64) -> HeteroGraph {
    let n = seq.rows();
    let mut edges: [Vec<Edge>; 4] = Default::default();
    for j in 0..n {
        for i in 0..n {
            // v_j is among the ε items right before v_i
            let j_prior = j < i && i - j <= epsilon;
            // v_j is among the ε items right after v_i
            let j_after = j > i && j - i <= epsilon;
            if j_prior {
                edges[0].push((j, i));
            }
            if j_after {
                edges[1].push((j, i));
            }
            if i != j {
                let (a, b) = (seq.row_slice(i), seq.row_slice(j));
                let mut dot = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                for k in 0..a.len() {
                    dot += a[k] * b[k];
                }
                for k in 0..a.len() {
                    aa += a[k] * a[k];
                }
                for k in 0..b.len() {
                    bb += b[k] * b[k];
                }
                let (na, nb) = (aa.sqrt(), bb.sqrt());
                let m = if na < 1e-12 || nb < 1e-12 { 0.0 } else { dot / (na * nb) };
                if m >= threshold {
                    edges[2].push((j, i));
                }
            }
            if i == j {
                edges[3].push((i, i));
            }
        }
    }
    HeteroGraph { n, edges }
}
