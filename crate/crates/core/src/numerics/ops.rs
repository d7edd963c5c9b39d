//! Forward implementations of the tape operations.
//!
//! Each method validates shapes, computes the output, and records the node.
//! Matrix-shaped ops treat their inputs as `rows × cols` over the last
//! dimension and produce rank-2 outputs.

use std::sync::Arc;

use super::tape::{Op, Var};
use super::{Adjacency, NumericsError, Tape, Tensor, PROB_CLAMP};

type Result<T> = std::result::Result<T, NumericsError>;

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> NumericsError {
    NumericsError::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(vec![rows, cols], data)
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        self.push("matmul", mat(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(NumericsError::Contract(format!(
                "transpose needs rank 2, got {:?}",
                av.shape()
            )));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let ad = av.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        self.push("transpose", mat(n, m, out), Op::Transpose(a), &[a])
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// Adds `bias` (numel = cols) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let cols = av.cols();
        if bv.numel() != cols {
            return Err(shape_err("add_row", av, bv));
        }
        let bd = bv.data();
        let data = av
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let out = mat(av.rows(), cols, data);
        self.push("add_row", out, Op::AddRow(a, bias), &[a, bias])
    }

    /// Scales row `r` of `a` by `c[r]` (`c` has one entry per row).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(c));
        let cols = av.cols();
        if cv.numel() != av.rows() {
            return Err(shape_err("mul_col", av, cv));
        }
        let cd = cv.data();
        let data = av
            .data()
            .chunks(cols)
            .zip(cd)
            .flat_map(|(row, s)| row.iter().map(move |x| x * s))
            .collect();
        let out = mat(av.rows(), cols, data);
        self.push("mul_col", out, Op::MulCol(a, c), &[a, c])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(NumericsError::Contract(format!(
                "leaky_relu slope must lie in (0, 1), got {slope}"
            )));
        }
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("leaky_relu", out, Op::LeakyRelu(a, slope), &[a])
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row, None);
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Softmax over the last dimension restricted to entries where `keep` is
    /// true; masked entries come out as exactly zero. Every row needs at
    /// least one kept entry.
    pub fn masked_softmax_lastdim(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let av = self.value(a);
        if keep.len() != av.numel() {
            return Err(NumericsError::Contract(format!(
                "mask has {} entries for a tensor of shape {:?}",
                keep.len(),
                av.shape()
            )));
        }
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for (row, mask) in data.chunks_mut(cols).zip(keep.chunks(cols)) {
            if !mask.iter().any(|&k| k) {
                return Err(NumericsError::Contract(
                    "masked softmax row has no unmasked entry".into(),
                ));
            }
            softmax_in_place(row, Some(mask));
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("masked_softmax", out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let out = Tensor::from_parts(av.shape().to_vec(), data);
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Row sums as a `rows × 1` column.
    pub fn sum_lastdim(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data: Vec<f64> = av.data().chunks(av.cols()).map(|r| r.iter().sum()).collect();
        let out = mat(data.len(), 1, data);
        self.push("sum_lastdim", out, Op::SumLastdim(a), &[a])
    }

    /// Column means as a `1 × cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![0.0; cols];
        for row in av.data().chunks(cols) {
            for (d, x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d /= rows as f64);
        self.push("mean_rows", mat(1, cols, data), Op::MeanRows(a), &[a])
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Contract("concat of zero tensors".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(shape_err("concat_lastdim", self.value(*first), self.value(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let out = mat(rows, total, data);
        self.push("concat_lastdim", out, Op::ConcatLastdim(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Contract("concat of zero tensors".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), pv));
            }
            data.extend_from_slice(pv.data());
        }
        let out = mat(data.len() / cols, cols, data);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let cols = av.cols();
        if len == 0 || start + len > cols {
            return Err(NumericsError::Contract(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                av.shape()
            )));
        }
        let data = av
            .data()
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = mat(av.rows(), len, data);
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        if len == 0 || start + len > rows {
            return Err(NumericsError::Contract(format!(
                "row slice {start}..{} out of range for {:?}",
                start + len,
                av.shape()
            )));
        }
        let data = av.data()[start * cols..(start + len) * cols].to_vec();
        self.push("slice_rows", mat(len, cols, data), Op::SliceRows(a, start), &[a])
    }

    /// Embedding lookup: row `indices[r]` of `table` becomes output row `r`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        if indices.is_empty() {
            return Err(NumericsError::Contract("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(NumericsError::Contract(format!(
                    "gather index {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(tv.row_slice(i));
        }
        let out = mat(indices.len(), cols, data);
        self.push(
            "gather_rows",
            out,
            Op::GatherRows(table, indices.to_vec()),
            &[table],
        )
    }

    /// Tiles a single row `times` times.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != 1 || times == 0 {
            return Err(NumericsError::Contract(format!(
                "repeat_rows needs a single row, got {:?}",
                av.shape()
            )));
        }
        let data = av.data().repeat(times);
        let out = mat(times, av.cols(), data);
        self.push("repeat_rows", out, Op::RepeatRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let out = av.reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Affine map `x · w + b` with `w: in × out` and `b: out`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Batch normalization over rows using the batch's own statistics.
    ///
    /// Returns the output plus the per-column batch mean and biased variance
    /// so the caller can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut mean = vec![0.0; cols];
        for row in xv.data().chunks(cols) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for row in xv.data().chunks(cols) {
            for c in 0..cols {
                let d = row[c] - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.batchnorm_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics: a deterministic
    /// affine map of the input.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batchnorm_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn batchnorm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = (xv.rows(), xv.cols());
        if gv.numel() != cols || bv.numel() != cols || mean.len() != cols || inv_std.len() != cols {
            return Err(shape_err("batchnorm_1d", xv, gv));
        }
        let (gd, bd) = (gv.data(), bv.data());
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut out = Vec::with_capacity(rows * cols);
        for row in xv.data().chunks(cols) {
            for c in 0..cols {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(h * gd[c] + bd[c]);
            }
        }
        self.push(
            "batchnorm_1d",
            mat(rows, cols, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Attention-weighted neighbor aggregation over a fixed adjacency.
    ///
    /// For destination `i` with in-neighbors `j`:
    /// `a_ij = LeakyReLU(self_score_i + nbr_score_j)`, `α_i· = softmax_j(a_ij)`,
    /// `out_i = Σ_j α_ij values_j`. Nodes without in-neighbors output zeros.
    pub fn graph_attend(
        &mut self,
        self_score: Var,
        nbr_score: Var,
        values: Var,
        adj: Arc<Adjacency>,
        slope: f64,
    ) -> Result<Var> {
        let n = adj.node_count();
        let (sv, tv, hv) = (self.value(self_score), self.value(nbr_score), self.value(values));
        if sv.numel() != n || tv.numel() != n || hv.rows() != n {
            return Err(shape_err("graph_attend", sv, hv));
        }
        let dh = hv.cols();
        let (sd, td, hd) = (sv.data(), tv.data(), hv.data());
        let mut pre = vec![0.0; adj.edge_count()];
        let mut alpha = vec![0.0; adj.edge_count()];
        let mut out = vec![0.0; n * dh];
        for i in 0..n {
            let range = adj.edge_range(i);
            if range.is_empty() {
                continue;
            }
            let mut max = f64::NEG_INFINITY;
            for e in range.clone() {
                let x = sd[i] + td[adj.sources()[e]];
                let a = if x >= 0.0 { x } else { slope * x };
                pre[e] = x;
                alpha[e] = a;
                max = max.max(a);
            }
            let mut z = 0.0;
            for e in range.clone() {
                alpha[e] = (alpha[e] - max).exp();
                z += alpha[e];
            }
            let orow = &mut out[i * dh..(i + 1) * dh];
            for e in range {
                alpha[e] /= z;
                let j = adj.sources()[e];
                for (o, h) in orow.iter_mut().zip(&hd[j * dh..(j + 1) * dh]) {
                    *o += alpha[e] * h;
                }
            }
        }
        self.push(
            "graph_attend",
            mat(n, dh, out),
            Op::GraphAttend {
                self_score,
                nbr_score,
                values,
                adj,
                slope,
                pre,
                alpha,
            },
            &[self_score, nbr_score, values],
        )
    }

    /// Mean binary cross-entropy of click probabilities against 0/1 labels,
    /// with probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(probs);
        if pv.numel() != labels.len() || labels.is_empty() {
            return Err(NumericsError::Contract(format!(
                "{} labels for {} probabilities",
                labels.len(),
                pv.numel()
            )));
        }
        let loss = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / labels.len() as f64;
        self.push(
            "binary_cross_entropy",
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        )
    }
}

/// Numerically stable in-place softmax; masked-out entries become zero.
pub fn softmax_in_place(row: &mut [f64], keep: Option<&[bool]>) {
    let kept = |i: usize| keep.is_none_or(|m| m[i]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| kept(*i))
        .map(|(_, x)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (i, x) in row.iter_mut().enumerate() {
        if kept(i) {
            *x = (*x - max).exp();
            z += *x;
        } else {
            *x = 0.0;
        }
    }
    row.iter_mut().for_each(|x| *x /= z);
}
