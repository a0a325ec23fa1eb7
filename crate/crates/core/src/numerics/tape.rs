//! Reverse-mode gradient tape.
//!
//! Every differentiable operation appends one node holding its output value and
//! the references needed to push gradients back to its inputs. `backward` walks
//! the nodes once, in reverse order of execution, accumulating gradients
//! additively into every input that requires them.

use super::kernels::{self, axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{check_temperature, Tensor};
use super::Real;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: Real = 1e-5;
const PROB_CLAMP: Real = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Real),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Var, Var),
    BroadcastRows(Var),
    MeanAxis(Var, usize),
    Rows(Var, usize),
    Sum(Var),
    Dot(Var, Var),
    MatVec(Var, Var),
    Outer(Var, Var),
    Stack(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<Real>, rstd: Vec<Real> },
    Attention { qkv: Var, heads: usize, probs: Vec<Real> },
    Softmax { x: Var, tau: Real },
    Cosine { a: Var, b: Var, na: Real, nb: Real },
    Nll { logits: Var, picks: Vec<(usize, usize)>, probs: Vec<Real> },
    Bce { p: Var, y: Real },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
    backward_done: bool,
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

    /// Registers an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Real {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if the node received any.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mat(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- forward operations ----

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a)?;
        let (k2, n) = self.mat(b)?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul inner extents disagree: {:?} × {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout used for `[out × in]` weight matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a)?;
        let (n, k2) = self.mat(b)?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul inner extents disagree: {:?} × {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), &[a, b]))
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real, op: Op, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Adds vector `b[n]` to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.mat(a)?;
        if self.shape(b) != [n] {
            return Err(dim_err(format!("add_row: {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).data().to_vec();
        let bias = self.value(b).data();
        for i in 0..m {
            axpy(1.0, bias, &mut out[i * n..(i + 1) * n]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(Real::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    /// Gathers rows `ids` of `table[V×d]` into a `[len(ids)×d]` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.mat(table)?;
        if ids.is_empty() {
            return Err(dim_err("embedding lookup of an empty sequence"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenId { id, size: v });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let op = Op::Embedding { table, ids: ids.to_vec() };
        Ok(self.push(Tensor::from_parts(vec![ids.len(), d], out), op, &[table]))
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.mat(a)?;
        let (m2, q) = self.mat(b)?;
        if m != m2 {
            return Err(dim_err(format!("concat_cols: {:?} | {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        Ok(self.push(Tensor::from_parts(vec![m, p + q], out), Op::ConcatCols(a, b), &[a, b]))
    }

    /// Repeats vector `v[n]` as the rows of an `[m×n]` matrix.
    pub fn broadcast_rows(&mut self, v: Var, m: usize) -> Result<Var> {
        let n = match self.shape(v) {
            [n] => *n,
            s => return Err(dim_err(format!("broadcast_rows expects a vector, got {s:?}"))),
        };
        if m == 0 {
            return Err(dim_err("broadcast to zero rows"));
        }
        let out = self.value(v).data().repeat(m);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::BroadcastRows(v), &[v]))
    }

    /// Mean along an axis; see [`super::mean_over_axis`].
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = super::tensor::mean_over_axis(self.value(x), axis)?;
        Ok(self.push(t, Op::MeanAxis(x, axis), &[x]))
    }

    /// Rows `start..end` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        if start >= end || end > m {
            return Err(dim_err(format!("row range {start}..{end} outside {m} rows")));
        }
        let out = self.value(x).data()[start * n..end * n].to_vec();
        Ok(self.push(Tensor::from_parts(vec![end - start, n], out), Op::Rows(x, start), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Inner product of two equal-length tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(dim_err(format!("dot: {:?} · {:?}", self.shape(a), self.shape(b))));
        }
        let s = dot(self.value(a).data(), self.value(b).data());
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// `a[m×n] · w[n]` as a vector of length `m`.
    pub fn matvec(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, n) = self.mat(a)?;
        if self.shape(w) != [n] {
            return Err(dim_err(format!("matvec: {:?} · {:?}", self.shape(a), self.shape(w))));
        }
        let out = (0..m).map(|i| dot(self.value(a).row(i), self.value(w).data())).collect();
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::MatVec(a, w), &[a, w]))
    }

    /// Outer product `a[m] ⊗ b[n]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = match (self.shape(a), self.shape(b)) {
            ([m], [n]) => (*m, *n),
            (sa, sb) => return Err(dim_err(format!("outer: {sa:?} ⊗ {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            axpy(self.value(a).data()[i], self.value(b).data(), &mut out[i * n..(i + 1) * n]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Outer(a, b), &[a, b]))
    }

    /// Concatenates single-element tensors into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(dim_err("stack of zero scalars"));
        }
        let mut out = Vec::with_capacity(items.len());
        for &v in items {
            if self.value(v).len() != 1 {
                return Err(dim_err(format!("stack expects scalars, got {:?}", self.shape(v))));
            }
            out.push(self.scalar(v));
        }
        Ok(self.push(Tensor::from_parts(vec![items.len()], out), Op::Stack(items.to_vec()), items))
    }

    /// Stacks tensors of equal row width on top of each other. Vectors count
    /// as single rows.
    pub fn concat_rows(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items.first().ok_or_else(|| dim_err("concatenation of zero blocks"))?;
        let n = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in items {
            let t = self.value(v);
            if t.shape().len() > 2 || t.cols() != n {
                return Err(dim_err(format!(
                    "concat_rows: width {n} and block {:?}",
                    t.shape()
                )));
            }
            rows += t.len() / n;
            data.extend_from_slice(t.data());
        }
        let t = Tensor::from_parts(vec![rows, n], data);
        Ok(self.push(t, Op::ConcatRows(items.to_vec()), items))
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Row-wise layer normalization with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat(x)?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(dim_err(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; m * n];
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<Real>() / n as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let op = Op::LayerNorm { x, gain, bias, mean: means, rstd: rstds };
        Ok(self.push(Tensor::from_parts(vec![m, n], out), op, &[x, gain, bias]))
    }

    /// Multi-head scaled dot-product attention over a packed `[T × 3d]` block
    /// holding queries, keys and values side by side. With `causal`, position
    /// `i` attends to positions `0..=i` only.
    pub fn attention(&mut self, qkv: Var, heads: usize, causal: bool) -> Result<Var> {
        let (t, w) = self.mat(qkv)?;
        if w % 3 != 0 || heads == 0 || (w / 3) % heads != 0 {
            return Err(dim_err(format!(
                "attention: packed width {w} does not split into 3 × {heads} heads"
            )));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        let mut o = vec![0.0; t * dh];
        for h in 0..heads {
            let q = gather_cols(src, w, h * dh, dh);
            let k = gather_cols(src, w, d + h * dh, dh);
            let v = gather_cols(src, w, 2 * d + h * dh, dh);
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            gemm_nt(&q, &k, p, t, dh, t);
            for i in 0..t {
                let span = if causal { i + 1 } else { t };
                let row = &mut p[i * t..(i + 1) * t];
                row[..span].iter_mut().for_each(|x| *x *= scale);
                kernels::softmax_in_place(&mut row[..span], 1.0);
                row[span..].iter_mut().for_each(|x| *x = 0.0);
            }
            o.iter_mut().for_each(|x| *x = 0.0);
            gemm_nn(p, &v, &mut o, t, t, dh);
            scatter_cols(&o, &mut out, d, h * dh, dh);
        }
        let op = Op::Attention { qkv, heads, probs };
        Ok(self.push(Tensor::from_parts(vec![t, d], out), op, &[qkv]))
    }

    /// Softmax of a vector at temperature `tau`.
    pub fn softmax(&mut self, x: Var, tau: Real) -> Result<Var> {
        check_temperature(tau)?;
        let t = super::tensor::softmax_with_temperature(self.value(x), tau)?;
        Ok(self.push(t, Op::Softmax { x, tau }, &[x]))
    }

    /// Cosine similarity of two vectors, as a scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = super::tensor::cosine_similarity(self.value(a), self.value(b))?;
        let na = dot(self.value(a).data(), self.value(a).data()).sqrt();
        let nb = dot(self.value(b).data(), self.value(b).data()).sqrt();
        Ok(self.push(Tensor::scalar(c), Op::Cosine { a, b, na, nb }, &[a, b]))
    }

    /// `−Σ log softmax(logits[row])[target]` over `(row, target)` picks.
    pub fn nll(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (m, v) = self.mat(logits)?;
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(picks.len() * v);
        for &(row, target) in picks {
            if row >= m {
                return Err(dim_err(format!("nll row {row} outside {m} rows")));
            }
            if target >= v {
                return Err(Error::TokenId { id: target, size: v });
            }
            let r = self.value(logits).row(row);
            let lse = kernels::log_sum_exp(r);
            total += lse - r[target];
            probs.extend(r.iter().map(|x| (x - lse).exp()));
        }
        let op = Op::Nll { logits, picks: picks.to_vec(), probs };
        Ok(self.push(Tensor::scalar(total), op, &[logits]))
    }

    /// Binary cross-entropy of a probability against label `y`, with the
    /// probability clamped to `[1e-12, 1 − 1e-12]`.
    pub fn bce(&mut self, p: Var, y: Real) -> Result<Var> {
        if self.value(p).len() != 1 {
            return Err(dim_err(format!("bce expects a scalar, got {:?}", self.shape(p))));
        }
        let pc = self.scalar(p).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let l = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        Ok(self.push(Tensor::scalar(l), Op::Bce { p, y }, &[p]))
    }

    // ---- reverse pass ----

    /// Populates gradients of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape("backward called twice without zero_grad".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[Real]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        let rg = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&nodes[a.0].value);
                let n = nodes[b.0].value.shape()[1];
                if let Some(ga) = acc!(*a) {
                    gemm_nt(g, val(*b), ga, m, n, k);
                }
                if let Some(gb) = acc!(*b) {
                    gemm_tn(val(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(&nodes[a.0].value);
                let n = nodes[b.0].value.shape()[0];
                if let Some(ga) = acc!(*a) {
                    gemm_nn(g, val(*b), ga, m, n, k);
                }
                if let Some(gb) = acc!(*b) {
                    gemm_tn(g, val(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = acc!(*b) {
                    axpy(1.0, g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = acc!(*b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddRow(a, b) => {
                let n = nodes[b.0].value.len();
                if let Some(ga) = acc!(*a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = acc!(*b) {
                    for row in g.chunks_exact(n) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc!(*a) {
                    axpy(*s, g, ga);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = acc!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = acc!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                if let Some(ga) = acc!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * kernels::gelu_grad(x[j]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                if let Some(gt) = acc!(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, p) = dims2(&nodes[a.0].value);
                let q = nodes[b.0].value.shape()[1];
                if let Some(ga) = acc!(*a) {
                    for r in 0..m {
                        axpy(1.0, &g[r * (p + q)..r * (p + q) + p], &mut ga[r * p..(r + 1) * p]);
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for r in 0..m {
                        axpy(1.0, &g[r * (p + q) + p..(r + 1) * (p + q)], &mut gb[r * q..(r + 1) * q]);
                    }
                }
            }
            Op::BroadcastRows(v) => {
                let n = nodes[v.0].value.len();
                if let Some(gv) = acc!(*v) {
                    for row in g.chunks_exact(n) {
                        axpy(1.0, row, gv);
                    }
                }
            }
            Op::MeanAxis(x, axis) => {
                let shape = nodes[x.0].value.shape().to_vec();
                if let Some(gx) = acc!(*x) {
                    match (shape.as_slice(), axis) {
                        ([n], _) => {
                            let s = g[0] / *n as Real;
                            gx.iter_mut().for_each(|v| *v += s);
                        }
                        ([r, c], 0) => {
                            let inv = 1.0 / *r as Real;
                            for row in gx.chunks_exact_mut(*c) {
                                axpy(inv, g, row);
                            }
                        }
                        ([_, c], _) => {
                            let inv = 1.0 / *c as Real;
                            for (row, &gr) in gx.chunks_exact_mut(*c).zip(g) {
                                row.iter_mut().for_each(|v| *v += gr * inv);
                            }
                        }
                        _ => unreachable!("validated in forward"),
                    }
                }
            }
            Op::Rows(x, start) => {
                let n = nodes[x.0].value.shape()[1];
                if let Some(gx) = acc!(*x) {
                    axpy(1.0, g, &mut gx[start * n..start * n + g.len()]);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    axpy(g[0], bv, ga);
                }
                if let Some(gb) = acc!(*b) {
                    axpy(g[0], av, gb);
                }
            }
            Op::MatVec(a, w) => {
                let (_, n) = dims2(&nodes[a.0].value);
                let (av, wv) = (val(*a), val(*w));
                if let Some(ga) = acc!(*a) {
                    for (row, &gr) in ga.chunks_exact_mut(n).zip(g) {
                        axpy(gr, wv, row);
                    }
                }
                if let Some(gw) = acc!(*w) {
                    for (row, &gr) in av.chunks_exact(n).zip(g) {
                        axpy(gr, row, gw);
                    }
                }
            }
            Op::Outer(a, b) => {
                let n = nodes[b.0].value.len();
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    for (gi, row) in ga.iter_mut().zip(g.chunks_exact(n)) {
                        *gi += dot(row, bv);
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for (&ai, row) in av.iter().zip(g.chunks_exact(n)) {
                        axpy(ai, row, gb);
                    }
                }
            }
            Op::Stack(items) => {
                for (k, v) in items.iter().enumerate() {
                    if let Some(gv) = acc!(*v) {
                        gv[0] += g[k];
                    }
                }
            }
            Op::ConcatRows(items) => {
                let mut off = 0;
                for v in items {
                    let n = nodes[v.0].value.len();
                    if let Some(gv) = acc!(*v) {
                        axpy(1.0, &g[off..off + n], gv);
                    }
                    off += n;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    axpy(1.0, g, gx);
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let (m, n) = dims2(&node.value);
                let xv = val(*x);
                let gv = val(*gain);
                let mut xhat = vec![0.0; n];
                let mut gx_row = vec![0.0; n];
                for r in 0..m {
                    let row = &xv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    for j in 0..n {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                    }
                    if let Some(gg) = acc!(*gain) {
                        for j in 0..n {
                            gg[j] += gr[j] * xhat[j];
                        }
                    }
                    if let Some(gb) = acc!(*bias) {
                        axpy(1.0, gr, gb);
                    }
                    if rg(*x) {
                        // dx = rstd/n · (n·dy·γ − Σ dy·γ − x̂ Σ dy·γ·x̂)
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dyg = gr[j] * gv[j];
                            s1 += dyg;
                            s2 += dyg * xhat[j];
                        }
                        let inv_n = 1.0 / n as Real;
                        for j in 0..n {
                            gx_row[j] = rstd[r] * (gr[j] * gv[j] - inv_n * s1 - xhat[j] * inv_n * s2);
                        }
                        let gx = acc!(*x).expect("requires grad");
                        axpy(1.0, &gx_row, &mut gx[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let (t, w) = dims2(&nodes[qkv.0].value);
                let d = w / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as Real).sqrt();
                let src = val(*qkv);
                if let Some(gs) = acc!(*qkv) {
                    let mut ds = vec![0.0; t * t];
                    let mut buf = vec![0.0; t * dh];
                    for h in 0..*heads {
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        let p = &probs[h * t * t..(h + 1) * t * t];
                        let q = gather_cols(src, w, qo, dh);
                        let k = gather_cols(src, w, ko, dh);
                        let v = gather_cols(src, w, vo, dh);
                        let go = gather_cols(g, d, h * dh, dh);
                        // dV = Pᵀ dO
                        buf.iter_mut().for_each(|x| *x = 0.0);
                        gemm_tn(p, &go, &mut buf, t, t, dh);
                        add_cols(&buf, gs, w, vo, dh);
                        // dS = P ⊙ (dO Vᵀ − rowsum) · scale
                        ds.iter_mut().for_each(|x| *x = 0.0);
                        gemm_nt(&go, &v, &mut ds, t, dh, t);
                        for i in 0..t {
                            let (pr, dr) = (&p[i * t..(i + 1) * t], &mut ds[i * t..(i + 1) * t]);
                            let s = dot(pr, dr);
                            for j in 0..t {
                                dr[j] = pr[j] * (dr[j] - s) * scale;
                            }
                        }
                        buf.iter_mut().for_each(|x| *x = 0.0);
                        gemm_nn(&ds, &k, &mut buf, t, t, dh);
                        add_cols(&buf, gs, w, qo, dh);
                        buf.iter_mut().for_each(|x| *x = 0.0);
                        gemm_tn(&ds, &q, &mut buf, t, t, dh);
                        add_cols(&buf, gs, w, ko, dh);
                    }
                }
            }
            Op::Softmax { x, tau } => {
                let y = node.value.data();
                if let Some(gx) = acc!(*x) {
                    let s: Real = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..y.len() {
                        gx[j] += y[j] * (g[j] - s) / tau;
                    }
                }
            }
            Op::Cosine { a, b, na, nb } => {
                let c = node.value.item();
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    for j in 0..av.len() {
                        ga[j] += g[0] * (bv[j] / (na * nb) - c * av[j] / (na * na));
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for j in 0..bv.len() {
                        gb[j] += g[0] * (av[j] / (na * nb) - c * bv[j] / (nb * nb));
                    }
                }
            }
            Op::Nll { logits, picks, probs } => {
                let v = nodes[logits.0].value.shape()[1];
                if let Some(gl) = acc!(*logits) {
                    for (k, &(row, target)) in picks.iter().enumerate() {
                        let p = &probs[k * v..(k + 1) * v];
                        let dst = &mut gl[row * v..(row + 1) * v];
                        axpy(g[0], p, dst);
                        dst[target] -= g[0];
                    }
                }
            }
            Op::Bce { p, y } => {
                let pv = val(*p)[0];
                if let Some(gp) = acc!(*p) {
                    if pv > PROB_CLAMP && pv < 1.0 - PROB_CLAMP {
                        gp[0] += g[0] * (-y / pv + (1.0 - y) / (1.0 - pv));
                    }
                }
            }
        }
    }
}

fn gather_cols(src: &[Real], width: usize, offset: usize, n: usize) -> Vec<Real> {
    src.chunks(width).flat_map(|row| &row[offset..offset + n]).copied().collect()
}

fn scatter_cols(block: &[Real], dst: &mut [Real], width: usize, offset: usize, n: usize) {
    for (row, b) in dst.chunks_mut(width).zip(block.chunks(n)) {
        row[offset..offset + n].copy_from_slice(b);
    }
}

fn add_cols(block: &[Real], dst: &mut [Real], width: usize, offset: usize, n: usize) {
    for (row, b) in dst.chunks_mut(width).zip(block.chunks(n)) {
        axpy(1.0, b, &mut row[offset..offset + n]);
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<Real>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<Real>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}
