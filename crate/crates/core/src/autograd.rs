//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] without copying; calling
//! [`Tape::backward`] walks the tape in reverse and returns gradients for the
//! trainable parameters and for any leaf created with [`Tape::input`].
//!
//! Everything is 2-D. Vectors are `1 x n` rows and scalars are `1 x 1`.

use std::borrow::Cow;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-compressed sparse matrix with constant coefficients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRows {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![Vec::new(); rows],
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Array2::zeros((self.rows, self.cols));
        for (i, row) in self.entries.iter().enumerate() {
            for &(j, c) in row {
                out[[i, j]] += c;
            }
        }
        out
    }

    pub fn matmul(&self, x: &Matrix) -> Matrix {
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for (i, row) in self.entries.iter().enumerate() {
            let mut dst = out.row_mut(i);
            for &(j, c) in row {
                dst.scaled_add(c, &x.row(j));
            }
        }
        out
    }

    /// `self^T * g`
    fn transpose_matmul(&self, g: &Matrix) -> Matrix {
        let mut out = Array2::zeros((self.cols, g.ncols()));
        for (i, row) in self.entries.iter().enumerate() {
            let src = g.row(i);
            for &(j, c) in row {
                out.row_mut(j).scaled_add(c, &src);
            }
        }
        out
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SpMM {
        matrix: Arc<SparseRows>,
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<Vec<f64>>,
    },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Indexed by `ParamId`; `None` for frozen or untouched parameters.
    pub params: Vec<Option<Matrix>>,
    nodes: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            params: vec![None; store.len()],
            nodes: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. a tape variable (only retained for inputs and seeds' ancestors).
    pub fn var(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Accumulates `other`'s parameter gradients into `self`.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if let Some(src) = src {
                match dst {
                    Some(d) => *d += src,
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    param_vars: Vec<Option<Var>>,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> (Vec<f64>, f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let probs = row.iter().map(|&v| (v - lse).exp()).collect();
    (probs, lse)
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Borrowed view of a stored parameter; deduplicated per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store;
        let v = self.push(
            Cow::Borrowed(store.get(id)),
            Op::Param(id),
            store.is_trainable(id),
        );
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Constant leaf; no gradient is tracked.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::var`].
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn input_borrowed(&mut self, value: &'a Matrix, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(value), Op::MatMul(a, b), rg)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(value), Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(value), Op::Add(a, b), rg)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(Cow::Owned(value), Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(Cow::Owned(value), Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(Cow::Owned(value), Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(Cow::Owned(value), Op::Gelu(a), rg)
    }

    /// `x W + b`, with `b` a `1 x out` row.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xw = self.matmul(x, weight);
        self.add_row(xw, bias)
    }

    /// Row-wise layer normalisation with affine `1 x n` gamma and beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Cow::Owned(value),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked out.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let mut value = self.value(x).clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let limit = if causal { (i + 1).min(row.len()) } else { row.len() };
            let max = row
                .slice(s![..limit])
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if j < limit {
                    *v = (*v - max).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(value), Op::Softmax(x), rg)
    }

    /// Selects rows of `table` (embedding lookup, row slicing).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let value = self.value(table).select(Axis(0), ids);
        let rg = self.rg(table);
        self.push(
            Cow::Owned(value),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(x);
        self.push(Cow::Owned(value), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(value), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Constant sparse matrix times `x`.
    pub fn spmm(&mut self, matrix: Arc<SparseRows>, x: Var) -> Var {
        let value = matrix.matmul(self.value(x));
        let rg = self.rg(x);
        self.push(Cow::Owned(value), Op::SpMM { matrix, x }, rg)
    }

    /// Sum over `targets = [(row, class)]` of `-log softmax(logits[row])[class]`,
    /// as a `1 x 1` scalar. An empty target list yields zero.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let lv = self.value(logits);
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for &(row, class) in targets {
            let r = lv.row(row);
            let (p, lse) = log_softmax_row(r);
            total += lse - r[class];
            probs.push(p);
        }
        let rg = self.rg(logits);
        self.push(
            Cow::Owned(Array2::from_elem((1, 1), total)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(Cow::Owned(value), Op::Sum(x), rg)
    }

    /// Reverse pass from one or more seeded outputs.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut params: Vec<Option<Matrix>> = vec![None; self.store.len()];
        for (v, seed) in seeds {
            accumulate(&mut grads[v.0], Cow::Borrowed(seed));
        }

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[idx].as_ref() {
                        accumulate(&mut params[id.0], Cow::Borrowed(g));
                    }
                    continue;
                }
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
        }

        Gradients {
            params,
            nodes: grads,
        }
    }

    /// Convenience: backward from a scalar output with unit seed.
    pub fn backward_scalar(&self, loss: Var) -> Gradients {
        self.backward(&[(loss, Array2::from_elem((1, 1), 1.0))])
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let send = |grads: &mut [Option<Matrix>], v: Var, d: Cow<'_, Matrix>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], d);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let d = g.dot(&self.value(*b).t());
                    send(grads, *a, Cow::Owned(d));
                }
                if self.rg(*b) {
                    let d = self.value(*a).t().dot(g);
                    send(grads, *b, Cow::Owned(d));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    let d = g.dot(self.value(*b));
                    send(grads, *a, Cow::Owned(d));
                }
                if self.rg(*b) {
                    let d = g.t().dot(self.value(*a));
                    send(grads, *b, Cow::Owned(d));
                }
            }
            Op::Add(a, b) => {
                send(grads, *a, Cow::Borrowed(g));
                send(grads, *b, Cow::Borrowed(g));
            }
            Op::AddRow(a, row) => {
                send(grads, *a, Cow::Borrowed(g));
                if self.rg(*row) {
                    let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(grads, *row, Cow::Owned(d));
                }
            }
            Op::Scale(a, factor) => send(grads, *a, Cow::Owned(g * *factor)),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                send(grads, *a, Cow::Owned(d));
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= gelu_grad(x));
                send(grads, *a, Cow::Owned(d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(*gamma) {
                    let d = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(grads, *gamma, Cow::Owned(d));
                }
                if self.rg(*beta) {
                    let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(grads, *beta, Cow::Owned(d));
                }
                if self.rg(*x) {
                    let gamma_v = self.value(*gamma);
                    let n = g.ncols() as f64;
                    let mut dx = g * gamma_v;
                    for ((mut row, xh), &is) in
                        dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let sum_d = row.sum();
                        let sum_dx: f64 = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut row)
                            .and(&xh)
                            .for_each(|d, &h| *d = is / n * (n * *d - sum_d - h * sum_dx));
                    }
                    send(grads, *x, Cow::Owned(dx));
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut d = g * y.as_ref();
                for (mut row, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = row.sum();
                    Zip::from(&mut row).and(&yrow).for_each(|d, &p| *d -= p * s);
                }
                send(grads, *x, Cow::Owned(d));
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut d = Array2::zeros(tv.raw_dim());
                for (r, &id) in ids.iter().enumerate() {
                    d.row_mut(id).scaled_add(1.0, &g.row(r));
                }
                send(grads, *table, Cow::Owned(d));
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(xv.raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                send(grads, *x, Cow::Owned(d));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.rg(p) {
                        let d = g.slice(s![.., offset..offset + w]).to_owned();
                        send(grads, p, Cow::Owned(d));
                    }
                    offset += w;
                }
            }
            Op::SpMM { matrix, x } => {
                send(grads, *x, Cow::Owned(matrix.transpose_matmul(g)));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g[[0, 0]];
                let lv = self.value(*logits);
                let mut d = Array2::zeros(lv.raw_dim());
                for (&(row, class), p) in targets.iter().zip(probs) {
                    let mut dr = d.row_mut(row);
                    for (dst, &pj) in dr.iter_mut().zip(p) {
                        *dst += scale * pj;
                    }
                    dr[class] -= scale;
                }
                send(grads, *logits, Cow::Owned(d));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                send(grads, *x, Cow::Owned(Array2::from_elem(xv.raw_dim(), g[[0, 0]])));
            }
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, d: Cow<'_, Matrix>) {
    match slot {
        Some(existing) => *existing += d.as_ref(),
        None => *slot = Some(d.into_owned()),
    }
}
