//! Matrix-valued reverse-mode tape.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! tracked parameters ([`Tape::param`]) or constants ([`Tape::constant`]); a
//! node is tracked when any of its inputs is. [`Var::detach`] produces an
//! untracked copy, so nothing downstream of it can send adjoint back.
//!
//! Backward walks the tape in reverse insertion order, which is a valid
//! reverse topological order, and accumulates adjoints in that fixed order.

use std::cell::{Ref, RefCell};
use std::f64::consts::PI;

use super::lu::Lu;
use super::Matrix;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Operation that produced a tape node.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    Sum(usize),
    Solve(usize, usize),
    Detach(usize),
    Gelu(usize),
    LayerNorm(usize),
    Softmax(usize),
    LogSoftmax(usize),
    NormalizeRows(usize),
    SliceRows { input: usize, start: usize },
    SliceCols { input: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SkewFromUpper(usize),
    Gather { table: usize, ids: Vec<usize> },
}

struct Node {
    op: OpKind,
    value: Matrix,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose adjoint is reported by [`Tape::backward`].
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(OpKind::Leaf, value, true)
    }

    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(OpKind::Leaf, value, false)
    }

    fn push(&self, op: OpKind, value: Matrix, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    pub fn op(&self, v: Var<'_>) -> OpKind {
        self.nodes.borrow()[v.id].op.clone()
    }

    /// Reverse sweep from a 1×1 root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.shape() != (1, 1) {
            let (r, c) = nodes[root.id].value.shape();
            return Err(Error::contract(format!("backward root must be 1x1, got {r}x{c}")));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; nodes.len()];
        if nodes[root.id].tracked {
            adj[root.id] = Some(Matrix::scalar(1.0));
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, OpKind::Leaf) {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            propagate(&nodes, id, &g, &mut adj)?;
            adj[id] = Some(g);
        }
        Ok(Gradients {
            shapes: nodes.iter().map(|n| n.value.shape()).collect(),
            adj,
        })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], nodes: &[Node], id: usize, g: Matrix) -> Result<()> {
    if !nodes[id].tracked {
        return Ok(());
    }
    match &mut adj[id] {
        Some(acc) => acc.axpy(1.0, &g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

fn broadcast_row(m: &Matrix, r: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| f(m.get(i, j), r.get(0, j)))
}

fn propagate(nodes: &[Node], id: usize, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        OpKind::Leaf => {}
        OpKind::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            if nodes[a].tracked {
                accumulate(adj, nodes, a, g.matmul(&val(b).transpose())?)?;
            }
            if nodes[b].tracked {
                accumulate(adj, nodes, b, val(a).transpose().matmul(g)?)?;
            }
        }
        OpKind::Add(a, b) => {
            accumulate(adj, nodes, *a, g.clone())?;
            accumulate(adj, nodes, *b, g.clone())?;
        }
        OpKind::Sub(a, b) => {
            accumulate(adj, nodes, *a, g.clone())?;
            accumulate(adj, nodes, *b, g.scale(-1.0))?;
        }
        OpKind::Mul(a, b) => {
            let (a, b) = (*a, *b);
            accumulate(adj, nodes, a, g.hadamard(val(b))?)?;
            accumulate(adj, nodes, b, g.hadamard(val(a))?)?;
        }
        OpKind::AddRow(a, r) => {
            accumulate(adj, nodes, *a, g.clone())?;
            accumulate(adj, nodes, *r, col_sums(g))?;
        }
        OpKind::MulRow(a, r) => {
            let (a, r) = (*a, *r);
            accumulate(adj, nodes, a, broadcast_row(g, val(r), |x, y| x * y))?;
            accumulate(adj, nodes, r, col_sums(&g.hadamard(val(a))?))?;
        }
        OpKind::Scale(a, s) => accumulate(adj, nodes, *a, g.scale(*s))?,
        OpKind::Transpose(a) => accumulate(adj, nodes, *a, g.transpose())?,
        OpKind::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(adj, nodes, *a, Matrix::filled(r, c, g.get(0, 0)))?;
        }
        OpKind::Solve(a, b) => {
            // X = A⁻¹B:  ḡB = A⁻ᵀ ḡX,  ḡA = −ḡB Xᵀ
            let (a, b) = (*a, *b);
            let lu = Lu::factor(val(a))?;
            let gb = lu.solve_transpose(g)?;
            if nodes[a].tracked {
                accumulate(adj, nodes, a, gb.matmul(&out.transpose())?.scale(-1.0))?;
            }
            accumulate(adj, nodes, b, gb)?;
        }
        OpKind::Detach(_) => {}
        OpKind::Gelu(a) => {
            let x = val(*a);
            let dx = x.map(gelu_grad).hadamard(g)?;
            accumulate(adj, nodes, *a, dx)?;
        }
        OpKind::LayerNorm(a) => {
            let x = val(*a);
            let n = x.cols() as f64;
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                let (mean, inv_std) = row_moments(x.row(i));
                let gr = g.row(i);
                let xhat: Vec<f64> = x.row(i).iter().map(|v| (v - mean) * inv_std).collect();
                let g_mean = gr.iter().sum::<f64>() / n;
                let gx_mean = gr.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                    *d = inv_std * (gr[j] - g_mean - xhat[j] * gx_mean);
                }
            }
            accumulate(adj, nodes, *a, dx)?;
        }
        OpKind::Softmax(a) => {
            let mut dx = Matrix::zeros(out.rows(), out.cols());
            for i in 0..out.rows() {
                let y = out.row(i);
                let gr = g.row(i);
                let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                    *d = y[j] * (gr[j] - dot);
                }
            }
            accumulate(adj, nodes, *a, dx)?;
        }
        OpKind::LogSoftmax(a) => {
            let mut dx = Matrix::zeros(out.rows(), out.cols());
            for i in 0..out.rows() {
                let gr = g.row(i);
                let total: f64 = gr.iter().sum();
                for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                    *d = gr[j] - out.get(i, j).exp() * total;
                }
            }
            accumulate(adj, nodes, *a, dx)?;
        }
        OpKind::NormalizeRows(a) => {
            let x = val(*a);
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                let norm = row_norm(x.row(i));
                let y = out.row(i);
                let gr = g.row(i);
                let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                    *d = (gr[j] - y[j] * dot) / norm;
                }
            }
            accumulate(adj, nodes, *a, dx)?;
        }
        OpKind::SliceRows { input, start } => {
            let (r, c) = val(*input).shape();
            let mut dx = Matrix::zeros(r, c);
            for i in 0..g.rows() {
                dx.row_mut(start + i).copy_from_slice(g.row(i));
            }
            accumulate(adj, nodes, *input, dx)?;
        }
        OpKind::SliceCols { input, start } => {
            let (r, c) = val(*input).shape();
            let mut dx = Matrix::zeros(r, c);
            for i in 0..r {
                dx.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
            }
            accumulate(adj, nodes, *input, dx)?;
        }
        OpKind::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let rows = val(p).rows();
                if nodes[p].tracked {
                    let ids: Vec<usize> = (offset..offset + rows).collect();
                    accumulate(adj, nodes, p, g.select_rows(&ids))?;
                }
                offset += rows;
            }
        }
        OpKind::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let cols = val(p).cols();
                if nodes[p].tracked {
                    let piece = Matrix::from_fn(g.rows(), cols, |i, j| g.get(i, offset + j));
                    accumulate(adj, nodes, p, piece)?;
                }
                offset += cols;
            }
        }
        OpKind::SkewFromUpper(p) => {
            let d = out.rows();
            let mut dp = Matrix::zeros(1, val(*p).cols());
            let mut k = 0;
            for i in 0..d {
                for j in i + 1..d {
                    dp.data_mut()[k] = g.get(i, j) - g.get(j, i);
                    k += 1;
                }
            }
            accumulate(adj, nodes, *p, dp)?;
        }
        OpKind::Gather { table, ids } => {
            let (r, c) = val(*table).shape();
            let mut dt = Matrix::zeros(r, c);
            for (row, &t) in ids.iter().enumerate() {
                for (d, s) in dt.row_mut(t).iter_mut().zip(g.row(row)) {
                    *d += s;
                }
            }
            accumulate(adj, nodes, *table, dt)?;
        }
    }
    Ok(())
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

const GELU_K: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let t = (c * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise softmax of a plain matrix, max-shifted.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// L2-normalizes every row; a zero row is a contract violation.
pub fn normalize_rows(x: &Matrix) -> Result<Matrix> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let norm = row_norm(out.row(i));
        if !(norm > 0.0) {
            return Err(Error::contract(format!("row {i} has zero norm")));
        }
        for v in out.row_mut(i) {
            *v /= norm;
        }
    }
    Ok(out)
}

pub fn layer_norm_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let (mean, inv_std) = row_moments(x.row(i));
        for v in out.row_mut(i) {
            *v = (*v - mean) * inv_std;
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Matrix> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn unary(self, op: OpKind, f: impl FnOnce(&Matrix) -> Result<Matrix>) -> Result<Var<'t>> {
        let value = f(&self.value())?;
        let tracked = self.is_tracked();
        Ok(self.tape.push(op, value, tracked))
    }

    fn binary(
        self,
        other: Var<'t>,
        op: OpKind,
        f: impl FnOnce(&Matrix, &Matrix) -> Result<Matrix>,
    ) -> Result<Var<'t>> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let value = f(&self.value(), &other.value())?;
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self.tape.push(op, value, tracked))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, OpKind::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, OpKind::Add(self.id, other.id), |a, b| a.add(b))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, OpKind::Sub(self.id, other.id), |a, b| a.sub(b))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, OpKind::Mul(self.id, other.id), |a, b| a.hadamard(b))
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(row, OpKind::AddRow(self.id, row.id), |a, r| {
            check_row(a, r, "add_row")?;
            Ok(broadcast_row(a, r, |x, y| x + y))
        })
    }

    /// Multiplies every row elementwise by a `1×cols` row.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(row, OpKind::MulRow(self.id, row.id), |a, r| {
            check_row(a, r, "mul_row")?;
            Ok(broadcast_row(a, r, |x, y| x * y))
        })
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary(OpKind::Scale(self.id, s), |a| Ok(a.scale(s)))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(OpKind::Transpose(self.id), |a| Ok(a.transpose()))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(OpKind::Sum(self.id), |a| Ok(Matrix::scalar(a.sum())))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// `X` with `self · X = rhs`.
    pub fn solve(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, OpKind::Solve(self.id, rhs.id), |a, b| Lu::factor(a)?.solve(b))
    }

    /// Value-identical, adjoint-opaque copy.
    pub fn detach(self) -> Var<'t> {
        let value = self.value().clone();
        self.tape.push(OpKind::Detach(self.id), value, false)
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary(OpKind::Gelu(self.id), |a| Ok(a.map(gelu)))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(self) -> Result<Var<'t>> {
        self.unary(OpKind::LayerNorm(self.id), |a| Ok(layer_norm_rows(a)))
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        self.unary(OpKind::Softmax(self.id), |a| Ok(softmax_rows(a)))
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        self.unary(OpKind::LogSoftmax(self.id), |a| Ok(log_softmax_rows(a)))
    }

    pub fn normalize_rows(self) -> Result<Var<'t>> {
        self.unary(OpKind::NormalizeRows(self.id), normalize_rows)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(OpKind::SliceRows { input: self.id, start }, |a| {
            if start + len > a.rows() {
                return Err(Error::dim("slice_rows", format!("{start}+{len} > {}", a.rows())));
            }
            let ids: Vec<usize> = (start..start + len).collect();
            Ok(a.select_rows(&ids))
        })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(OpKind::SliceCols { input: self.id, start }, |a| {
            if start + len > a.cols() {
                return Err(Error::dim("slice_cols", format!("{start}+{len} > {}", a.cols())));
            }
            Ok(Matrix::from_fn(a.rows(), len, |i, j| a.get(i, start + j)))
        })
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = first_tape(parts, "concat_rows")?;
        let value = {
            let vals: Vec<Matrix> = parts.iter().map(|p| p.value().clone()).collect();
            Matrix::vstack(&vals)?
        };
        let tracked = parts.iter().any(|p| p.is_tracked());
        Ok(tape.push(OpKind::ConcatRows(parts.iter().map(|p| p.id).collect()), value, tracked))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = first_tape(parts, "concat_cols")?;
        let value = {
            let vals: Vec<Ref<'_, Matrix>> = parts.iter().map(|p| p.value()).collect();
            let rows = vals[0].rows();
            if vals.iter().any(|v| v.rows() != rows) {
                return Err(Error::dim("concat_cols", "row counts differ"));
            }
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            for i in 0..rows {
                let mut off = 0;
                for v in &vals {
                    out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
                    off += v.cols();
                }
            }
            out
        };
        let tracked = parts.iter().any(|p| p.is_tracked());
        Ok(tape.push(OpKind::ConcatCols(parts.iter().map(|p| p.id).collect()), value, tracked))
    }

    /// Builds the `dim×dim` skew-symmetric matrix whose strict upper triangle,
    /// read row-major, is `self` (a `1×dim(dim−1)/2` row).
    pub fn skew_from_upper(self, dim: usize) -> Result<Var<'t>> {
        self.unary(OpKind::SkewFromUpper(self.id), |p| {
            if p.rows() != 1 || p.cols() != dim * dim.saturating_sub(1) / 2 {
                return Err(Error::dim(
                    "skew_from_upper",
                    format!("{}x{} parameters for dim {dim}", p.rows(), p.cols()),
                ));
            }
            Ok(skew_from_upper(p.data(), dim))
        })
    }

    /// Row lookup into an embedding table.
    pub fn gather(self, ids: &[usize]) -> Result<Var<'t>> {
        let ids = ids.to_vec();
        let op = OpKind::Gather {
            table: self.id,
            ids: ids.clone(),
        };
        self.unary(op, |t| {
            if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
                return Err(Error::Lookup(format!("row {bad} of a {}-row table", t.rows())));
            }
            Ok(t.select_rows(&ids))
        })
    }
}

fn first_tape<'t>(parts: &[Var<'t>], op: &'static str) -> Result<&'t Tape> {
    parts
        .first()
        .map(|p| p.tape)
        .ok_or_else(|| Error::dim(op, "no inputs"))
}

fn check_row(a: &Matrix, r: &Matrix, op: &'static str) -> Result<()> {
    if r.rows() != 1 || r.cols() != a.cols() {
        return Err(Error::dim(
            op,
            format!("row {}x{} against {}x{}", r.rows(), r.cols(), a.rows(), a.cols()),
        ));
    }
    Ok(())
}

pub(crate) fn skew_from_upper(upper: &[f64], dim: usize) -> Matrix {
    let mut c = Matrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        for j in i + 1..dim {
            c.set(i, j, upper[k]);
            c.set(j, i, -upper[k]);
            k += 1;
        }
    }
    c
}

/// Adjoints from one backward sweep, indexed by tape node.
pub struct Gradients {
    shapes: Vec<(usize, usize)>,
    adj: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of `v`; an exact zero matrix when nothing reached it.
    pub fn get(&self, v: Var<'_>) -> Matrix {
        self.adj
            .get(v.id)
            .and_then(|a| a.clone())
            .unwrap_or_else(|| {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            })
    }

    /// `true` when some adjoint flowed into `v`.
    pub fn reached(&self, v: Var<'_>) -> bool {
        self.adj.get(v.id).is_some_and(|a| a.is_some())
    }
}
