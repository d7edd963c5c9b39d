use std::ops::Range;

/// Incoming-edge lists grouped by destination, in compressed row form.
///
/// Within one destination the sources keep the order in which the edges
/// were supplied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    sources: Vec<usize>,
}

impl Adjacency {
    /// Groups directed `(source, dest)` edges by destination. Indices must be
    /// below `n`.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut counts = vec![0usize; n + 1];
        for &(s, d) in edges {
            assert!(s < n && d < n, "edge ({s}, {d}) outside {n} nodes");
            counts[d + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut cursor = counts;
        let mut sources = vec![0; edges.len()];
        for &(s, d) in edges {
            sources[cursor[d]] = s;
            cursor[d] += 1;
        }
        Self { offsets, sources }
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.sources.len()
    }

    pub fn edge_range(&self, dest: usize) -> Range<usize> {
        self.offsets[dest]..self.offsets[dest + 1]
    }

    pub fn in_neighbors(&self, dest: usize) -> &[usize] {
        &self.sources[self.edge_range(dest)]
    }

    pub fn in_degree(&self, dest: usize) -> usize {
        self.edge_range(dest).len()
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }
}
