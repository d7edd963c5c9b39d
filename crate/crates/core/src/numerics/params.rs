//! Named parameter storage, gradient buffers, and tape binding.

use std::collections::BTreeMap;

use super::{NumericsError, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers such as running statistics are stored and checkpointed but
    /// never receive gradients.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Registration order is the
/// checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "parameter {name} registered twice"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replaces every value with the matching entry, requiring an exact
    /// match of names, order-independent, and shapes.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) -> Result<(), NumericsError> {
        let mut seen = vec![false; self.params.len()];
        let mut problems = Vec::new();
        let mut staged = Vec::with_capacity(entries.len());
        for (name, tensor) in entries {
            match self.by_name.get(&name) {
                None => problems.push(format!("unexpected parameter {name}")),
                Some(&id) => {
                    let expected = self.params[id.0].value.shape();
                    if expected != tensor.shape() {
                        seen[id.0] = true;
                        problems.push(format!(
                            "{name}: expected shape {expected:?}, found {:?}",
                            tensor.shape()
                        ));
                    } else if std::mem::replace(&mut seen[id.0], true) {
                        problems.push(format!("duplicate parameter {name}"));
                    } else {
                        staged.push((id, tensor));
                    }
                }
            }
        }
        for (i, s) in seen.iter().enumerate() {
            if !s {
                problems.push(format!("missing parameter {}", self.params[i].name));
            }
        }
        if !problems.is_empty() {
            return Err(NumericsError::Checkpoint(problems.join("; ")));
        }
        for (id, tensor) in staged {
            self.params[id.0].value = tensor;
        }
        Ok(())
    }
}

/// Dense gradient buffer, one slot per parameter. Never reset implicitly.
#[derive(Clone, Debug)]
pub struct Gradients {
    data: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            data: store.params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn merge(&mut self, sparse: &SparseGrads) {
        for (id, g) in &sparse.dense {
            for (d, s) in self.data[id.0].iter_mut().zip(g) {
                *d += s;
            }
        }
        for (id, row, g) in &sparse.rows {
            let cols = g.len();
            for (d, s) in self.data[id.0][row * cols..(row + 1) * cols].iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            self.data.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_finite())
    }
}

/// Gradients of one tape, keyed by parameter, with embedding rows kept
/// sparse.
#[derive(Clone, Debug, Default)]
pub struct SparseGrads {
    pub dense: Vec<(ParamId, Vec<f64>)>,
    pub rows: Vec<(ParamId, usize, Vec<f64>)>,
}

/// Maps parameters onto leaves of one tape.
#[derive(Debug)]
pub struct Binder {
    lookup: Vec<Option<Var>>,
    bound: Vec<(ParamId, Var)>,
    gathered: Vec<(ParamId, Vec<usize>, Var)>,
}

impl Binder {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            lookup: vec![None; store.len()],
            bound: Vec::new(),
            gathered: Vec::new(),
        }
    }

    /// Leaf holding a copy of the whole parameter; bound at most once per tape.
    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.lookup[id.0] {
            return v;
        }
        let p = store.param(id);
        let v = tape.leaf(p.value.clone(), p.trainable);
        self.lookup[id.0] = Some(v);
        self.bound.push((id, v));
        v
    }

    /// Leaf holding only the listed rows of a table parameter. Gradients
    /// scatter back to those rows.
    pub fn bind_rows(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        id: ParamId,
        rows: &[usize],
    ) -> Result<Var, NumericsError> {
        let p = store.param(id);
        let (n, cols) = (p.value.rows(), p.value.cols());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(NumericsError::Contract(format!(
                    "row {r} out of range for {} ({n} rows)",
                    p.name
                )));
            }
            data.extend_from_slice(p.value.row_slice(r));
        }
        let v = tape.leaf(Tensor::new(vec![rows.len(), cols], data)?, p.trainable);
        self.gathered.push((id, rows.to_vec(), v));
        Ok(v)
    }

    pub fn collect(&self, tape: &Tape) -> SparseGrads {
        let mut out = SparseGrads::default();
        for &(id, v) in &self.bound {
            if let Some(g) = tape.grad(v) {
                out.dense.push((id, g.to_vec()));
            }
        }
        for (id, rows, v) in &self.gathered {
            if let Some(g) = tape.grad(*v) {
                let cols = g.len() / rows.len();
                for (r, chunk) in rows.iter().zip(g.chunks(cols)) {
                    out.rows.push((*id, *r, chunk.to_vec()));
                }
            }
        }
        out
    }
}
