//! Tape-based reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Every value is a row-major `rows × cols` matrix (vectors are `1 × n`).
//! Operations are recorded on a [`Tape`] in execution order, so the backward
//! pass is a single reverse sweep. Gradients accumulate by addition, which is
//! what parameter reuse across time steps and batch examples needs.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sparseops::{EdgeExclusion, OperatorSet};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(x: f64) -> Self {
        Self::new(1, 1, vec![x])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self::new(1, data.len(), data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Scalar value of a `1 × 1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar tensor");
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `c = a·b + beta·c` for logical `m×k` and `k×n` operands, optionally
/// reading either operand transposed from its row-major storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the strides above address exactly the asserted buffer lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Clamp(Var, f64, f64),
    NormalizeL1(Var, f64),
    SparseChain(Box<SparseChain>),
    Bce(Var, usize),
}

#[derive(Debug)]
struct SparseChain {
    state: Var,
    attn: Var,
    rho: Option<Var>,
    ops: Arc<OperatorSet>,
    exclude: EdgeExclusion,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Gather(..) => "embedding_lookup",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::SoftmaxRows(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Clamp(..) => "clamp",
            Op::NormalizeL1(..) => "normalize_l1",
            Op::SparseChain(..) => "sparse_chain",
            Op::Bce(..) => "binary_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; build one per batch or example.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<AutodiffError>,
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

    /// First numeric fault observed during the forward pass, if any.
    pub fn fault(&self) -> Option<&AutodiffError> {
        self.fault.as_ref()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.fault.is_none() && !value.all_finite() {
            self.fault = Some(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.rg(*v)),
            Op::Scale(a, _)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Gather(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Clamp(a, _, _)
            | Op::NormalizeL1(a, _)
            | Op::Bce(a, _) => self.rg(*a),
            Op::SparseChain(sc) => {
                self.rg(sc.state) || self.rg(sc.attn) || sc.rho.is_some_and(|r| self.rg(r))
            }
        };
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

    /// Differentiable input (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        assert_eq!(k, k2, "matmul shape mismatch: {m}x{k} · {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        self.push(Tensor::new(m, n, out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// `a + 1·bias`, broadcasting a `1 × n` bias over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(bias), (1, n), "bias shape mismatch");
        let mut out = self.value(a).clone();
        let b = self.value(bias).data();
        for r in 0..m {
            for (x, y) in out.data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *x += y;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.rows, x.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let m = self.shape(parts[0]).0;
        assert!(
            parts.iter().all(|p| self.shape(*p).0 == m),
            "concat_cols row mismatch"
        );
        let n: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        self.push(Tensor::new(m, n, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.shape(parts[0]).1;
        assert!(
            parts.iter().all(|p| self.shape(*p).1 == n),
            "concat_rows column mismatch"
        );
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let m = out.len() / n.max(1);
        self.push(Tensor::new(m, n, out), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice_cols out of range");
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(Tensor::new(m, len, out), Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(start + len <= m, "slice_rows out of range");
        let out = self.value(a).data[start * n..(start + len) * n].to_vec();
        self.push(Tensor::new(len, n, out), Op::SliceRows(a, start))
    }

    /// Row gather (embedding lookup): output row `i` is `table[ids[i]]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, n) = self.shape(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            assert!(i < v, "embedding id {i} out of range {v}");
            out.extend_from_slice(t.row(i));
        }
        self.push(Tensor::new(ids.len(), n, out), Op::Gather(table, ids.to_vec()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows {
            softmax_in_place(&mut out.data[r * x.cols..(r + 1) * x.cols]);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp bounds inverted");
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// `x / max(floor, ‖x‖₁)`.
    pub fn normalize_l1(&mut self, a: Var, floor: f64) -> Var {
        assert!(floor > 0.0, "normalization floor must be positive");
        let x = self.value(a);
        let norm: f64 = x.data.iter().map(|v| v.abs()).sum();
        let d = norm.max(floor);
        let out = x.map(|v| v / d);
        self.push(out, Op::NormalizeL1(a, floor))
    }

    /// One weighted hop `Σ_k attn[k] · (state^T B_k)` over an operator set.
    ///
    /// `state` is `1 × E`, `attn` is `1 × K` with slot 0 the identity. When
    /// `rho` (`E × (K-1)`) is given, every stored entry in row `i` of
    /// operator `k` is replaced by `rho[i][k-1]`; otherwise the operators'
    /// own weights are used. Gradients flow to `state`, `attn` and `rho`.
    pub fn sparse_chain(
        &mut self,
        state: Var,
        attn: Var,
        rho: Option<Var>,
        ops: &Arc<OperatorSet>,
        exclude: &EdgeExclusion,
    ) -> Var {
        let n = ops.num_entities();
        let k = ops.num_operators();
        assert_eq!(self.shape(state), (1, n), "sparse_chain state shape mismatch");
        assert_eq!(self.shape(attn), (1, k), "sparse_chain attention shape mismatch");
        if let Some(r) = rho {
            assert_eq!(self.shape(r), (n, k - 1), "sparse_chain rho shape mismatch");
        }
        let u = self.value(state).data();
        let a = self.value(attn).data();
        let rho_v = rho.map(|r| self.value(r));
        let mut out = vec![0.0; n];
        for (i, &ui) in u.iter().enumerate() {
            if ui == 0.0 {
                continue;
            }
            out[i] += a[0] * ui;
            let row_excl = row_exclusions(exclude, i);
            for (r, op) in ops.relations().iter().enumerate() {
                let row_w = rho_v.map_or(1.0, |t| t.get(i, r));
                let coef = a[r + 1] * ui * row_w;
                if coef == 0.0 {
                    continue;
                }
                let (cols, w) = op.row(i);
                for (&c, &x) in cols.iter().zip(w) {
                    if is_excluded(&row_excl, op.rel.0, c) {
                        continue;
                    }
                    out[c as usize] += coef * x;
                }
            }
        }
        let node = SparseChain {
            state,
            attn,
            rho,
            ops: Arc::clone(ops),
            exclude: exclude.clone(),
        };
        self.push(Tensor::row_vector(out), Op::SparseChain(Box::new(node)))
    }

    /// `-Σ_i [y_i log x_i + (1-y_i) log(1-x_i)]` with `y` one-hot at `target`.
    pub fn binary_cross_entropy(&mut self, a: Var, target: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows, 1, "binary_cross_entropy takes a row vector");
        assert!(target < x.cols, "target out of range");
        let l = bce(x.data(), target);
        self.push(Tensor::scalar(l), Op::Bce(a, target))
    }

    /// Reverse sweep from a scalar output with seed 1.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        self.backward_with_seed(output, Tensor::scalar(1.0))
    }

    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients, AutodiffError> {
        self.backward_seeds(vec![(output, seed)])
    }

    /// Reverse sweep seeded at several outputs at once; equivalent to
    /// backpropagating `Σ_i sum(seed_i ⊙ output_i)`.
    pub fn backward_seeds(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients, AutodiffError> {
        if let Some(f) = &self.fault {
            return Err(f.clone());
        }
        let last = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        let mut grads: Vec<Option<Tensor>> = vec![None; (last + 1).min(self.nodes.len())];
        for (v, seed) in seeds {
            assert_eq!(self.shape(v), seed.shape(), "seed shape mismatch");
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&seed),
                g @ None => *g = Some(seed),
            }
        }
        for id in (0..grads.len()).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(AutodiffError::NonFinite {
                        op: self.nodes[id].op.name(),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.rg(*a) {
                    let ga = slot(grads, *a, (m, k));
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut ga.data, 1.0);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, (k, n));
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut gb.data, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        slot(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.rg(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.rg(*bias) {
                    let gb = slot(grads, *bias, (1, g.cols));
                    for r in 0..g.rows {
                        for (x, y) in gb.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = slot(grads, *a, g.shape());
                    for ((o, gi), y) in ga.data.iter_mut().zip(&g.data).zip(&xb.data) {
                        *o += gi * y;
                    }
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, g.shape());
                    for ((o, gi), y) in gb.data.iter_mut().zip(&g.data).zip(&xa.data) {
                        *o += gi * y;
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g.shape());
                for (o, gi) in ga.data.iter_mut().zip(&g.data) {
                    *o += s * gi;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (m, n) = self.shape(*p);
                    if self.rg(*p) {
                        let gp = slot(grads, *p, (m, n));
                        for r in 0..m {
                            for (o, gi) in gp.data[r * n..(r + 1) * n]
                                .iter_mut()
                                .zip(&g.row(r)[off..off + n])
                            {
                                *o += gi;
                            }
                        }
                    }
                    off += n;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.rg(*p) {
                        let gp = slot(grads, *p, self.shape(*p));
                        for (o, gi) in gp.data.iter_mut().zip(&g.data[off..off + len]) {
                            *o += gi;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.shape(*a);
                let len = g.cols;
                let ga = slot(grads, *a, (m, n));
                for r in 0..m {
                    for (o, gi) in ga.data[r * n + start..r * n + start + len]
                        .iter_mut()
                        .zip(g.row(r))
                    {
                        *o += gi;
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let shape = self.shape(*a);
                let n = shape.1;
                let ga = slot(grads, *a, shape);
                for (o, gi) in ga.data[start * n..start * n + g.len()].iter_mut().zip(&g.data) {
                    *o += gi;
                }
            }
            Op::Gather(table, ids) => {
                let shape = self.shape(*table);
                let n = shape.1;
                let gt = slot(grads, *table, shape);
                for (r, &i) in ids.iter().enumerate() {
                    for (o, gi) in gt.data[i * n..(i + 1) * n].iter_mut().zip(g.row(r)) {
                        *o += gi;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, g.shape());
                for ((o, gi), yi) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *o += gi * yi * (1.0 - yi);
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, g.shape());
                for ((o, gi), yi) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *o += gi * (1.0 - yi * yi);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols;
                let ga = slot(grads, *a, g.shape());
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..n {
                        ga.data[r * n + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                let ga = slot(grads, *a, self.shape(*a));
                for o in ga.data.iter_mut() {
                    *o += s;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let ga = slot(grads, *a, g.shape());
                for ((o, gi), xi) in ga.data.iter_mut().zip(&g.data).zip(&x.data) {
                    if *xi > *lo && *xi < *hi {
                        *o += gi;
                    }
                }
            }
            Op::NormalizeL1(a, floor) => {
                let x = self.value(*a);
                let norm: f64 = x.data.iter().map(|v| v.abs()).sum();
                let ga = slot(grads, *a, g.shape());
                if norm > *floor {
                    let gx: f64 = g.data.iter().zip(&x.data).map(|(p, q)| p * q).sum();
                    let corr = gx / (norm * norm);
                    for ((o, gi), xi) in ga.data.iter_mut().zip(&g.data).zip(&x.data) {
                        *o += gi / norm - xi.signum() * corr;
                    }
                } else {
                    for (o, gi) in ga.data.iter_mut().zip(&g.data) {
                        *o += gi / floor;
                    }
                }
            }
            Op::Bce(a, target) => {
                let x = self.value(*a);
                let s = g.item();
                let ga = slot(grads, *a, x.shape());
                for (i, (o, xi)) in ga.data.iter_mut().zip(&x.data).enumerate() {
                    *o += if i == *target {
                        -s / xi
                    } else {
                        s / (1.0 - xi)
                    };
                }
            }
            Op::SparseChain(sc) => self.backprop_sparse_chain(sc, g, grads),
        }
    }

    fn backprop_sparse_chain(&self, sc: &SparseChain, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let ops = &sc.ops;
        let n = ops.num_entities();
        let kr = ops.num_relations();
        let u = self.value(sc.state).data();
        let a = self.value(sc.attn).data();
        let rho_v = sc.rho.map(|r| self.value(r));
        let need_u = self.rg(sc.state);
        let need_a = self.rg(sc.attn);
        let need_rho = sc.rho.is_some_and(|r| self.rg(r));
        let gd = g.data();

        let mut du = if need_u { vec![0.0; n] } else { Vec::new() };
        let mut da = vec![0.0; kr + 1];
        let mut drho: Vec<(usize, usize, f64)> = Vec::new();
        let mut gk = vec![0.0; kr];
        for i in 0..n {
            let ui = u[i];
            if ui == 0.0 && !need_u {
                continue;
            }
            // gk[r] = Σ_{j in row_r(i)} w_ij · g[j]
            let row_excl = row_exclusions(&sc.exclude, i);
            for (r, op) in ops.relations().iter().enumerate() {
                let (cols, w) = op.row(i);
                let mut acc = 0.0;
                for (&c, &x) in cols.iter().zip(w) {
                    if is_excluded(&row_excl, op.rel.0, c) {
                        continue;
                    }
                    acc += x * gd[c as usize];
                }
                gk[r] = acc;
            }
            if need_u {
                let mut s = a[0] * gd[i];
                for r in 0..kr {
                    let rw = rho_v.map_or(1.0, |t| t.get(i, r));
                    s += a[r + 1] * rw * gk[r];
                }
                du[i] = s;
            }
            if ui != 0.0 {
                da[0] += ui * gd[i];
                for r in 0..kr {
                    let rw = rho_v.map_or(1.0, |t| t.get(i, r));
                    da[r + 1] += ui * rw * gk[r];
                    if need_rho && gk[r] != 0.0 {
                        drho.push((i, r, a[r + 1] * ui * gk[r]));
                    }
                }
            }
        }
        if need_u {
            let gs = slot(grads, sc.state, (1, n));
            for (o, x) in gs.data.iter_mut().zip(&du) {
                *o += x;
            }
        }
        if need_a {
            let ga = slot(grads, sc.attn, (1, kr + 1));
            for (o, x) in ga.data.iter_mut().zip(&da) {
                *o += x;
            }
        }
        if let (true, Some(rv)) = (need_rho, sc.rho) {
            let gr = slot(grads, rv, (n, kr));
            for (i, r, x) in drho {
                gr.data[i * kr + r] += x;
            }
        }
    }
}

fn row_exclusions(exclude: &EdgeExclusion, row: usize) -> Vec<(u32, u32)> {
    if exclude.is_empty() {
        return Vec::new();
    }
    exclude.rows_matching(row as u32)
}

#[inline]
fn is_excluded(row_excl: &[(u32, u32)], rel: u32, col: u32) -> bool {
    !row_excl.is_empty() && row_excl.iter().any(|&(r, c)| r == rel && c == col)
}

fn slot(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn bce(x: &[f64], target: usize) -> f64 {
    -x.iter()
        .enumerate()
        .map(|(i, &p)| if i == target { p.ln() } else { (1.0 - p).ln() })
        .sum::<f64>()
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coords: usize,
}

/// Compares reverse-mode gradients with central differences.
///
/// `f` rebuilds the scalar from parameter leaves on a fresh tape. Up to
/// `max_coords` coordinates (all, if fewer) are sampled with `seed`; the
/// error per coordinate is `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ps: &[Tensor]| -> Result<(Tape, Var, Vec<Var>), AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars);
        if let Some(e) = tape.fault() {
            return Err(e.clone());
        }
        Ok((tape, out, vars))
    };
    let (tape, out, vars) = eval(params)?;
    let grads = tape.backward(out)?;

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let picked: Vec<(usize, usize)> = if coords.len() <= max_coords {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, coords.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for &(p, i) in &picked {
        let g_ad = grads.get(vars[p]).map_or(0.0, |g| g.data()[i]);
        let orig = work[p].data[i];
        work[p].data[i] = orig + step;
        let (t1, o1, _) = eval(&work)?;
        work[p].data[i] = orig - step;
        let (t2, o2, _) = eval(&work)?;
        work[p].data[i] = orig;
        let g_fd = (t1.value(o1).item() - t2.value(o2).item()) / (2.0 * step);
        let err = (g_ad - g_fd).abs() / 1f64.max(g_ad.abs()).max(g_fd.abs());
        worst = worst.max(err);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coords: picked.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgdata::{EntityId, RelationId, Triple, Vocabulary};
    use crate::sparseops::build_operators;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row_vector(vec![0.0; 3]));
        let y = t.softmax(x);
        for &p in t.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn square_grad_check() {
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.mul(v[0], v[0]);
            t.sum(y)
        };
        let p = [Tensor::scalar(3.0)];
        let mut tape = Tape::new();
        let x = tape.param(p[0].clone());
        let y = f(&mut tape, &[x]);
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().item(), 6.0);
        let gc = grad_check(f, &p, 1e-5, 10, 0).unwrap();
        assert!(gc.max_rel_error < 1e-8, "{gc:?}");
    }

    #[test]
    fn nan_is_reported_with_op_name() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row_vector(vec![2.0, 0.5]));
        let y = t.binary_cross_entropy(x, 1);
        assert_eq!(t.fault(), Some(&AutodiffError::NonFinite { op: "binary_cross_entropy" }));
        assert!(t.backward(y).is_err());
        let gc = grad_check(|t, v| t.binary_cross_entropy(v[0], 1), &[Tensor::row_vector(vec![2.0, 0.5])], 1e-5, 4, 0);
        assert!(gc.is_err());
    }

    #[test]
    #[should_panic(expected = "matmul shape mismatch")]
    fn matmul_shape_mismatch_panics() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        t.matmul(a, b);
    }

    /// Exercises every dense primitive in one scalar composite.
    fn composite(t: &mut Tape, v: &[Var]) -> Var {
        let (w, x, b, table) = (v[0], v[1], v[2], v[3]);
        let h = t.matmul(x, w); // 3x4
        let h = t.add_row(h, b);
        let s = t.sigmoid(h);
        let th = t.tanh(h);
        let m = t.mul(s, th);
        let e = t.embedding_lookup(table, &[2, 0, 2]); // 3x4
        let m = t.add(m, e);
        let left = t.slice_cols(m, 0, 2);
        let right = t.slice_cols(m, 2, 2);
        let cat = t.concat_cols(&[right, left]);
        let top = t.slice_rows(cat, 0, 1);
        let rest = t.slice_rows(cat, 1, 2);
        let stacked = t.concat_rows(&[rest, top]);
        let sm = t.softmax(stacked);
        let sc = t.scale(sm, 1.7);
        let prod = t.mul(sc, stacked);
        let c = t.clamp(prod, -0.3, 0.3);
        let row = t.slice_rows(c, 1, 1);
        let nrm = t.normalize_l1(row, 1.0);
        let below = t.normalize_l1(nrm, 5.0);
        let above = t.normalize_l1(below, 0.01);
        let p = t.softmax(above);
        let p = t.clamp(p, 1e-7, 1.0 - 1e-7);
        let l = t.binary_cross_entropy(p, 1);
        let s2 = t.sum(c);
        t.add(l, s2)
    }

    #[test]
    fn composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            let params = vec![
                rand_tensor(&mut rng, 5, 4),
                rand_tensor(&mut rng, 3, 5),
                rand_tensor(&mut rng, 1, 4),
                rand_tensor(&mut rng, 4, 4),
            ];
            let gc = grad_check(composite, &params, 1e-5, 1000, trial).unwrap();
            assert!(gc.max_rel_error < 1e-4, "trial {trial}: {gc:?}");
        }
    }

    #[test]
    fn sparse_chain_matches_finite_differences() {
        let mut v = Vocabulary::new(true);
        let names = ["a", "b", "c", "d", "e"];
        let ids: Vec<EntityId> = names.iter().map(|n| v.intern_entity(n)).collect();
        let r0 = v.intern_relation("r0");
        let r1 = v.intern_relation("r1");
        let g = vec![
            Triple::new(ids[0], r0, ids[1]),
            Triple::new(ids[1], r1, ids[2]),
            Triple::new(ids[0], r1, ids[3]),
            Triple::new(ids[3], r0, ids[4]),
            Triple::new(ids[2], r0, ids[0]),
            Triple::new(ids[4], r1, ids[1]),
        ];
        let ops = Arc::new(build_operators(&g, &v));
        let excl = EdgeExclusion::for_query(&v, ids[0], r0, ids[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            rand_tensor(&mut rng, 1, 5),  // attention logits hop 1
            rand_tensor(&mut rng, 1, 5),  // attention logits hop 2
            rand_tensor(&mut rng, 5, 4),  // rho logits
            rand_tensor(&mut rng, 1, 5),  // initial state (dense, so du is exercised)
        ];
        let f = |t: &mut Tape, p: &[Var]| {
            let a1 = t.softmax(p[0]);
            let a2 = t.softmax(p[1]);
            let rho = t.softmax(p[2]);
            let u0 = t.sigmoid(p[3]);
            let u1 = t.sparse_chain(u0, a1, Some(rho), &ops, &excl);
            let u1 = t.normalize_l1(u1, 1.0);
            let u2 = t.sparse_chain(u1, a2, Some(rho), &ops, &excl);
            let s = t.clamp(u2, 1e-7, 1.0 - 1e-7);
            t.binary_cross_entropy(s, 2)
        };
        let gc = grad_check(f, &params, 1e-5, 1000, 0).unwrap();
        assert!(gc.max_rel_error < 1e-4, "{gc:?}");
        assert_eq!(gc.coords, 35);
    }

    #[test]
    fn backward_is_linear_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![
            rand_tensor(&mut rng, 5, 4),
            rand_tensor(&mut rng, 3, 5),
            rand_tensor(&mut rng, 1, 4),
            rand_tensor(&mut rng, 4, 4),
        ];
        let mut t = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| t.param(p.clone())).collect();
        let l1 = composite(&mut t, &vars);
        let sq = t.mul(vars[0], vars[0]);
        let l2 = t.sum(sq);
        let both = t.add(l1, l2);
        let g_both = t.backward(both).unwrap();
        let g_both_again = t.backward(both).unwrap();
        let g1 = t.backward(l1).unwrap();
        let g2 = t.backward(l2).unwrap();
        for v in &vars {
            let a = g_both.get(*v).unwrap().data();
            assert_eq!(a, g_both_again.get(*v).unwrap().data());
            let b1 = g1.get(*v).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; a.len()]);
            let b2 = g2.get(*v).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; a.len()]);
            for i in 0..a.len() {
                assert!((a[i] - b1[i] - b2[i]).abs() < 1e-12);
            }
        }
        let zero = t.backward_with_seed(both, Tensor::scalar(0.0)).unwrap();
        for v in &vars {
            assert!(zero.get(*v).unwrap().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn sparse_chain_forward_uses_rho_rows() {
        let mut v = Vocabulary::new(false);
        let a = v.intern_entity("a");
        let b = v.intern_entity("b");
        let r = v.intern_relation("r");
        let ops = Arc::new(build_operators(&[Triple::new(a, r, b)], &v));
        let mut t = Tape::new();
        let u = t.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let attn = t.constant(Tensor::row_vector(vec![0.25, 0.75]));
        let rho = t.constant(Tensor::new(2, 1, vec![0.5, 1.0]));
        let out = t.sparse_chain(u, attn, Some(rho), &ops, &EdgeExclusion::none());
        assert_eq!(t.value(out).data(), &[0.25, 0.375]);
        let _ = RelationId(0);
    }
}
