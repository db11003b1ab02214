// SPDX-License-Identifier: MIT OR Apache-2.0

//! Matrix-level reverse-mode differentiation.
//!
//! A [`GradTape`] records every operation of a forward pass as a node holding
//! its value and the indices of its operands. Nodes are appended in execution
//! order, so a single reverse sweep over the node list visits every consumer
//! before its producers.
//!
//! All recorded values are rank-2; vectors are `1×n` rows and scalars `1×1`.
//! The recording methods assume shapes were validated by the caller and panic
//! on mismatch.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Add(usize, usize),
    /// Adds a `1×n` row to every row of an `m×n` matrix.
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    Gather(usize, Vec<usize>),
    Sum(usize),
    /// Mean negative log-likelihood of one target class per row.
    CrossEntropy(usize, Vec<usize>),
    /// Row-weighted squared error against a constant target.
    SquaredError(usize, Tensor, Vec<f64>),
}

/// Recorded operation graph of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct GradTape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
}

/// Adjoints produced by one reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.adjoints[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Whether `v` lies on a path to the differentiated output.
    pub fn reaches(&self, v: Var) -> bool {
        self.adjoints[v.0].is_some()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, op: Op) -> Var {
        let value = evaluate(&op, &self.values);
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        assert_eq!(value.rank(), 2, "tape values are matrices");
        self.ops.push(Op::Leaf);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a.0, b.0))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMulT(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.push(Op::AddRow(a.0, row.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.push(Op::Scale(a.0, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Sigmoid(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.push(Op::SoftmaxRows(a.0))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        self.push(Op::ConcatRows(parts.iter().map(|v| v.0).collect()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        self.push(Op::ConcatCols(parts.iter().map(|v| v.0).collect()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.push(Op::SliceRows(a.0, start, len))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.push(Op::SliceCols(a.0, start, len))
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        self.push(Op::Gather(table.0, ids.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a.0))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        self.push(Op::CrossEntropy(logits.0, targets.to_vec()))
    }

    pub fn squared_error(&mut self, pred: Var, target: Tensor, row_weights: Vec<f64>) -> Var {
        self.push(Op::SquaredError(pred.0, target, row_weights))
    }

    /// Re-evaluates every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Vec<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.values.len());
        for (op, recorded) in self.ops.iter().zip(&self.values) {
            let v = match op {
                Op::Leaf => recorded.clone(),
                _ => evaluate(op, &values),
            };
            values.push(v);
        }
        values
    }

    /// Reverse sweep from a scalar node.
    pub fn gradients(&self, output: Var) -> Result<Gradients> {
        let shape = self.values[output.0].shape();
        if shape != [1, 1] {
            return Err(Error::InvalidInput(format!(
                "gradients need a scalar output, got shape {shape:?}"
            )));
        }
        Ok(self.backward(output, Tensor::scalar(1.0)))
    }

    /// Gradients of a single entry `output[row, col]` with respect to `wrt`.
    pub fn grad_of(&self, output: Var, row: usize, col: usize, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let (r, c) = self.values[output.0].dims2();
        if row >= r || col >= c {
            return Err(Error::InvalidInput(format!(
                "output index ({row}, {col}) outside a {r}x{c} output"
            )));
        }
        let mut seed = Tensor::zeros(&[r, c]);
        seed.set(row, col, 1.0);
        let grads = self.backward(output, seed);
        Ok(wrt.iter().map(|&v| grads.wrt(v)).collect())
    }

    fn backward(&self, output: Var, seed: Tensor) -> Gradients {
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        adj.resize(self.values.len(), None);
        Gradients {
            adjoints: adj,
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
        }
    }

    fn propagate_node(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let vals = &self.values;
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // C = A·B: dA = G·Bᵀ, dB = Aᵀ·G
                let da = g.matmul(&vals[*b].transpose()).expect("matmul adjoint");
                let db = vals[*a].transpose().matmul(g).expect("matmul adjoint");
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::MatMulT(a, b) => {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let da = g.matmul(&vals[*b]).expect("matmul_t adjoint");
                let db = g.transpose().matmul(&vals[*a]).expect("matmul_t adjoint");
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::AddRow(a, r) => {
                accumulate(adj, *a, g.clone());
                let (rows, cols) = g.dims2();
                let mut dr = vec![0.0; cols];
                for k in 0..rows {
                    for (d, &x) in dr.iter_mut().zip(g.row(k)) {
                        *d += x;
                    }
                }
                accumulate(adj, *r, Tensor::row_vector(dr));
            }
            Op::Mul(a, b) => {
                accumulate(adj, *a, g.hadamard(&vals[*b]).expect("mul adjoint"));
                accumulate(adj, *b, g.hadamard(&vals[*a]).expect("mul adjoint"));
            }
            Op::Scale(a, k) => accumulate(adj, *a, g.scale(*k)),
            Op::Tanh(a) => {
                let d = vals[i]
                    .zip_map(g, "tanh adjoint", |y, gy| gy * (1.0 - y * y))
                    .expect("tanh adjoint");
                accumulate(adj, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = vals[i]
                    .zip_map(g, "sigmoid adjoint", |y, gy| gy * y * (1.0 - y))
                    .expect("sigmoid adjoint");
                accumulate(adj, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &vals[i];
                let (rows, cols) = y.dims2();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                accumulate(adj, *a, Tensor::from_vec(vec![rows, cols], d).expect("shape"));
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = vals[p].rows();
                    let piece = g.data()[offset * cols..(offset + n) * cols].to_vec();
                    accumulate(adj, p, Tensor::from_vec(vec![n, cols], piece).expect("shape"));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let n = vals[p].cols();
                    let mut piece = Vec::with_capacity(rows * n);
                    for r in 0..rows {
                        piece.extend_from_slice(&g.row(r)[offset..offset + n]);
                    }
                    accumulate(adj, p, Tensor::from_vec(vec![rows, n], piece).expect("shape"));
                    offset += n;
                }
            }
            Op::SliceRows(a, start, len) => {
                let (rows, cols) = vals[*a].dims2();
                let mut d = Tensor::zeros(&[rows, cols]);
                d.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                accumulate(adj, *a, d);
            }
            Op::SliceCols(a, start, len) => {
                let (rows, cols) = vals[*a].dims2();
                let mut d = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    d.data_mut()[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                accumulate(adj, *a, d);
            }
            Op::Gather(table, ids) => {
                let (rows, cols) = vals[*table].dims2();
                let mut d = Tensor::zeros(&[rows, cols]);
                for (k, &id) in ids.iter().enumerate() {
                    let dst = &mut d.data_mut()[id * cols..(id + 1) * cols];
                    for (x, &gv) in dst.iter_mut().zip(g.row(k)) {
                        *x += gv;
                    }
                }
                accumulate(adj, *table, d);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(adj, *a, Tensor::filled(vals[*a].shape(), gv));
            }
            Op::CrossEntropy(logits, targets) => {
                let gv = g.data()[0];
                let mut p = vals[*logits].softmax_rows().expect("softmax");
                let (rows, cols) = p.dims2();
                let k = gv / rows as f64;
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut p.data_mut()[r * cols..(r + 1) * cols];
                    row[t] -= 1.0;
                    for x in row.iter_mut() {
                        *x *= k;
                    }
                }
                accumulate(adj, *logits, p);
            }
            Op::SquaredError(pred, target, w) => {
                let gv = g.data()[0];
                let denom = w.iter().sum::<f64>().max(1.0);
                let (_, cols) = target.dims2();
                let mut d = vals[*pred].sub(target).expect("squared error shapes");
                for (r, chunk) in d.data_mut().chunks_mut(cols).enumerate() {
                    for x in chunk {
                        *x *= 2.0 * w[r] * gv / denom;
                    }
                }
                accumulate(adj, *pred, d);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut adj[idx] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn evaluate(op: &Op, vals: &[Tensor]) -> Tensor {
    match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => vals[*a].matmul(&vals[*b]).expect("tape matmul shapes"),
        Op::MatMulT(a, b) => vals[*a]
            .matmul(&vals[*b].transpose())
            .expect("tape matmul_t shapes"),
        Op::Add(a, b) => vals[*a].add(&vals[*b]).expect("tape add shapes"),
        Op::AddRow(a, r) => {
            let (_, cols) = vals[*a].dims2();
            let row = vals[*r].data();
            assert_eq!(row.len(), cols, "tape add_row shapes");
            let mut out = vals[*a].clone();
            for chunk in out.data_mut().chunks_mut(cols) {
                for (x, b) in chunk.iter_mut().zip(row) {
                    *x += b;
                }
            }
            out
        }
        Op::Mul(a, b) => vals[*a].hadamard(&vals[*b]).expect("tape mul shapes"),
        Op::Scale(a, k) => vals[*a].scale(*k),
        Op::Tanh(a) => vals[*a].map(f64::tanh),
        Op::Sigmoid(a) => vals[*a].map(|x| 1.0 / (1.0 + (-x).exp())),
        Op::SoftmaxRows(a) => vals[*a].softmax_rows().expect("softmax"),
        Op::ConcatRows(parts) => {
            let cols = vals[parts[0]].cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                assert_eq!(vals[p].cols(), cols, "tape concat_rows shapes");
                rows += vals[p].rows();
                data.extend_from_slice(vals[p].data());
            }
            Tensor::from_vec(vec![rows, cols], data).expect("shape")
        }
        Op::ConcatCols(parts) => {
            let rows = vals[parts[0]].rows();
            let cols: usize = parts.iter().map(|&p| vals[p].cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(vals[p].row(r));
                }
            }
            Tensor::from_vec(vec![rows, cols], data).expect("tape concat_cols shapes")
        }
        Op::SliceRows(a, start, len) => {
            let cols = vals[*a].cols();
            let data = vals[*a].data()[start * cols..(start + len) * cols].to_vec();
            Tensor::from_vec(vec![*len, cols], data).expect("shape")
        }
        Op::SliceCols(a, start, len) => {
            let rows = vals[*a].rows();
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&vals[*a].row(r)[*start..start + len]);
            }
            Tensor::from_vec(vec![rows, *len], data).expect("shape")
        }
        Op::Gather(table, ids) => {
            let cols = vals[*table].cols();
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                data.extend_from_slice(vals[*table].row(id));
            }
            Tensor::from_vec(vec![ids.len(), cols], data).expect("gather ids")
        }
        Op::Sum(a) => Tensor::scalar(vals[*a].sum()),
        Op::CrossEntropy(logits, targets) => {
            let l = &vals[*logits];
            let (rows, _) = l.dims2();
            assert_eq!(targets.len(), rows, "one target per row");
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = l.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            Tensor::scalar(total / rows as f64)
        }
        Op::SquaredError(pred, target, w) => {
            let p = &vals[*pred];
            let (_, cols) = target.dims2();
            let denom = w.iter().sum::<f64>().max(1.0);
            let mut total = 0.0;
            for (r, (pr, tr)) in p.data().chunks(cols).zip(target.data().chunks(cols)).enumerate() {
                let se: f64 = pr.iter().zip(tr).map(|(a, b)| (a - b) * (a - b)).sum();
                total += w[r] * se;
            }
            Tensor::scalar(total / denom)
        }
    }
}
