//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every value is treated as a `rows x cols` matrix (see [`Tensor::rows`]).
//! Nodes are appended in evaluation order, so a reverse sweep over the tape
//! is a valid topological order and gradient accumulation order is fixed.

use crate::element::{gemm, Element, View};
use crate::error::{NnError, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Which keys each query may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnMask {
    Full,
    /// Query `t` sees keys `<= t`.
    Causal,
    /// Row-major `T x T`, `true` = allowed.
    Custom(Vec<bool>),
}

impl AttnMask {
    fn allowed(&self, t: usize, s: usize, len: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal => s <= t,
            AttnMask::Custom(m) => m[t * len + s],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, rstd: Vec<S> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, seq_len: usize, probs: Vec<S> },
    Gather { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    StraightThrough(Var),
    Sum(Var),
    SumSquares(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S>, scale: S, mask: Vec<bool> },
    BceWithLogits { logits: Var, targets: Vec<S> },
    MeanSegments { x: Var, segments: Vec<(usize, usize)> },
    MaskRows { x: Var, fill: Var, rows: Vec<bool> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A computation tape. Parameters are pulled from an optional
/// [`ParamStore`] the first time they are referenced.
pub struct Graph<'p, S: Element> {
    nodes: Vec<Node<S>>,
    store: Option<&'p ParamStore<S>>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<S>>>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NnError::Shape(msg))
}

fn gelu_parts<S: Element>(x: S) -> (S, S) {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (S::one() + th);
    let dy = half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + S::of(3.0) * a * x * x);
    (y, dy)
}

impl<'p, S: Element> Default for Graph<'p, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Element> Graph<'p, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), store: None, param_vars: Vec::new(), grads: Vec::new() }
    }

    pub fn with_params(store: &'p ParamStore<S>) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            param_vars: vec![None; store.len()],
            grads: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by node {}", self.nodes.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Input tensor; differentiable iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let rg = tensor.requires_grad;
        self.nodes.push(Node { value: tensor, op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    /// Stop-gradient copy.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let t = store.get(id).clone().with_grad(true);
        let v = self.leaf(t);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return shape_err(format!("matmul of {m}x{k} by {k2}x{n}"));
        }
        let out = crate::element::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return shape_err(format!("{what} of {:?} and {:?}", self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (r, c) = self.dims(a);
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::matrix(r, c, data).expect("shape checked by caller")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = S::of(factor);
        let (r, c) = self.dims(a);
        let data = self.value(a).data().iter().map(|&x| x * f).collect();
        let t = Tensor::matrix(r, c, data).expect("same shape");
        self.push(t, Op::Scale(a, f), &[a])
    }

    /// `x [n, d] + b [1, d]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims(x);
        if self.value(b).len() != d {
            return shape_err(format!("bias of {} values for {d} columns", self.value(b).len()));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        Ok(self.push(t, Op::AddBias(x, b), &[x, b]))
    }

    /// Row-wise normalization with learned gain and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims(x);
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return shape_err(format!("layer norm parameters do not match width {d}"));
        }
        let eps = S::of(eps);
        let df = S::of_usize(d);
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![S::zero(); n * d];
        let mut rstd = vec![S::zero(); n];
        let mut out = vec![S::zero(); n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / df;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|&v| gelu_parts(v).0).collect();
        let t = Tensor::matrix(r, c, data).expect("same shape");
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// `seq_len` rows stacked in `q`, `k`, `v` (each `[batch * seq_len, D]`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq_len: usize, mask: &AttnMask) -> Result<Var> {
        let (n, d) = self.dims(q);
        if self.dims(k) != (n, d) || self.dims(v) != (n, d) {
            return shape_err("attention q, k, v shapes differ".into());
        }
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("width {d} not divisible by {heads} heads"));
        }
        if seq_len == 0 || n % seq_len != 0 {
            return shape_err(format!("{n} rows are not a whole number of length-{seq_len} sequences"));
        }
        if let AttnMask::Custom(m) = mask {
            if m.len() != seq_len * seq_len {
                return shape_err(format!("mask has {} entries, expected {}", m.len(), seq_len * seq_len));
            }
        }
        let batch = n / seq_len;
        let dh = d / heads;
        let scale = S::one() / S::of_usize(dh).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let tt = seq_len * seq_len;
        let mut probs = vec![S::zero(); batch * heads * tt];
        let mut out = vec![S::zero(); n * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq_len * d + h * dh;
                let p = &mut probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                let qv = View { data: qd, offset: base, rows: seq_len, cols: dh, rs: d, cs: 1 };
                let kv = View { data: kd, offset: base, rows: seq_len, cols: dh, rs: d, cs: 1 };
                gemm(scale, qv, kv.t(), S::zero(), p, 0, seq_len, 1);
                for t in 0..seq_len {
                    let row = &mut p[t * seq_len..(t + 1) * seq_len];
                    let mut mx = S::neg_infinity();
                    for (s, &x) in row.iter().enumerate() {
                        if mask.allowed(t, s, seq_len) && x > mx {
                            mx = x;
                        }
                    }
                    let mut total = S::zero();
                    for (s, x) in row.iter_mut().enumerate() {
                        if mask.allowed(t, s, seq_len) {
                            *x = (*x - mx).exp();
                            total = total + *x;
                        } else {
                            *x = S::zero();
                        }
                    }
                    if total > S::zero() {
                        row.iter_mut().for_each(|x| *x = *x / total);
                    }
                }
                let pv = View::dense(&*p, seq_len, seq_len);
                let vv = View { data: vd, offset: base, rows: seq_len, cols: dh, rs: d, cs: 1 };
                gemm(S::one(), pv, vv, S::zero(), &mut out, base, d, 1);
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        Ok(self.push(t, Op::Attention { q, k, v, heads, seq_len, probs }, &[q, k, v]))
    }

    /// Attention weights of an attention node, `[batch, heads, T, T]` flattened.
    pub fn attention_probs(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Selects rows of `x` (embedding lookup when `x` is a table).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(NnError::InvalidArgument(format!("row index {bad} out of range for {r} rows")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(idx.len(), c, out)?;
        Ok(self.push(t, Op::Gather { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return shape_err(format!("columns {start}..{} of {c}", start + len));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&xs[row * c + start..row * c + start + len]);
        }
        let t = Tensor::matrix(r, len, out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.dims(p).0,
            None => return Err(NnError::InvalidArgument("nothing to concatenate".into())),
        };
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return shape_err("concatenated parts differ in row count".into());
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Forward value is `value`; the backward pass copies the incoming
    /// gradient to `z` unchanged.
    pub fn straight_through(&mut self, z: Var, value: Tensor<S>) -> Result<Var> {
        if (value.rows(), value.cols()) != self.dims(z) {
            return shape_err("straight-through value shape differs from its input".into());
        }
        let (r, c) = self.dims(z);
        let t = Tensor::matrix(r, c, value.into_data())?;
        Ok(self.push(t, Op::StraightThrough(z), &[z]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum::<S>();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// Softmax cross-entropy of each row against `targets`, over rows where
    /// `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool], reduction: Reduction) -> Result<Var> {
        let (n, k) = self.dims(logits);
        if targets.len() != n || mask.len() != n {
            return shape_err(format!("{n} rows, {} targets, {} mask entries", targets.len(), mask.len()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NnError::InvalidArgument("cross-entropy mask selects no positions".into()));
        }
        let ls = self.value(logits).data();
        let mut probs = vec![S::zero(); n * k];
        let mut loss = S::zero();
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            if targets[r] >= k {
                return Err(NnError::InvalidArgument(format!("target {} outside {k} classes", targets[r])));
            }
            let row = &ls[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for (p, &x) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (x - mx).exp();
                total = total + *p;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p = *p / total);
            loss = loss + (mx + total.ln() - row[targets[r]]);
        }
        let scale = match reduction {
            Reduction::Mean => S::one() / S::of_usize(count),
            Reduction::Sum => S::one(),
        };
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, scale, mask: mask.to_vec() };
        Ok(self.push(Tensor::scalar(loss * scale), op, &[logits]))
    }

    /// Mean binary cross-entropy of `[n, 1]` logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S]) -> Result<Var> {
        let xs = self.value(logits).data();
        if xs.len() != targets.len() || xs.is_empty() {
            return shape_err(format!("{} logits for {} targets", xs.len(), targets.len()));
        }
        let mut loss = S::zero();
        for (&x, &y) in xs.iter().zip(targets) {
            loss = loss + x.max(S::zero()) - x * y + (S::one() + (-x.abs()).exp()).ln();
        }
        loss = loss / S::of_usize(xs.len());
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// Mean of rows `start..end` for each segment.
    pub fn mean_segments(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xs = self.value(x).data();
        let mut out = vec![S::zero(); segments.len() * c];
        for (i, &(s, e)) in segments.iter().enumerate() {
            if s >= e || e > r {
                return Err(NnError::InvalidArgument(format!("segment {s}..{e} invalid for {r} rows")));
            }
            let w = S::one() / S::of_usize(e - s);
            for row in s..e {
                for j in 0..c {
                    out[i * c + j] = out[i * c + j] + xs[row * c + j];
                }
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = *v * w);
        }
        let t = Tensor::matrix(segments.len(), c, out)?;
        Ok(self.push(t, Op::MeanSegments { x, segments: segments.to_vec() }, &[x]))
    }

    /// Replaces the selected rows of `x` with the single row `fill`.
    pub fn mask_rows(&mut self, x: Var, fill: Var, rows: &[bool]) -> Result<Var> {
        let (n, d) = self.dims(x);
        if rows.len() != n || self.value(fill).len() != d {
            return shape_err("mask_rows shapes do not match".into());
        }
        let mut out = self.value(x).data().to_vec();
        let f = self.value(fill).data();
        for (r, &m) in rows.iter().enumerate() {
            if m {
                out[r * d..(r + 1) * d].copy_from_slice(f);
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        Ok(self.push(t, Op::MaskRows { x, fill, rows: rows.to_vec() }, &[x, fill]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err("backward needs a scalar loss".into());
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient with respect to `v` from the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter referenced by this graph.
    pub fn param_grads(&self) -> Grads<S> {
        let grads = self
            .param_vars
            .iter()
            .map(|pv| pv.and_then(|v| self.grad(v).map(|g| g.to_vec())))
            .collect();
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:block) => {{
                let v: Var = $v;
                if wants(v) {
                    let n = nodes[v.0].value.len();
                    let $buf: &mut Vec<S> = grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
                    $body
                }
            }};
        }
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                acc!(*a, |buf| {
                    gemm(S::one(), View::dense(g, m, n), View::dense(val(*b).data(), k, n).t(), S::one(), buf, 0, k, 1);
                });
                acc!(*b, |buf| {
                    gemm(S::one(), View::dense(val(*a).data(), m, k).t(), View::dense(g, m, n), S::one(), buf, 0, n, 1);
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc!(v, |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
                    });
                }
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
                });
                acc!(*b, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &x)| *o = *o - x);
                });
            }
            Op::Mul(a, b) => {
                acc!(*a, |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(val(*b).data()) {
                        *o = *o + x * y;
                    }
                });
                acc!(*b, |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(g).zip(val(*a).data()) {
                        *o = *o + x * y;
                    }
                });
            }
            Op::Scale(a, f) => {
                acc!(*a, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x * *f);
                });
            }
            Op::AddBias(x, b) => {
                acc!(*x, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &v)| *o = *o + v);
                });
                let d = val(*x).cols().max(1);
                acc!(*b, |buf| {
                    for row in g.chunks(d) {
                        buf.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = val(*x).cols();
                let gam = val(*gamma).data();
                acc!(*beta, |buf| {
                    for row in g.chunks(d) {
                        buf.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
                    }
                });
                acc!(*gamma, |buf| {
                    for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &v), &h) in buf.iter_mut().zip(row).zip(hrow) {
                            *o = *o + v * h;
                        }
                    }
                });
                acc!(*x, |buf| {
                    let df = S::of_usize(d);
                    for (r, (row, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for c in 0..d {
                            let dh = row[c] * gam[c];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hrow[c];
                        }
                        mean_dh = mean_dh / df;
                        mean_dh_h = mean_dh_h / df;
                        for c in 0..d {
                            let dh = row[c] * gam[c];
                            let o = &mut buf[r * d + c];
                            *o = *o + rstd[r] * (dh - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                acc!(*x, |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(val(*x).data()) {
                        *o = *o + gv * gelu_parts(xv).1;
                    }
                });
            }
            Op::Attention { q, k, v, heads, seq_len, probs } => {
                let (n, d) = (val(*q).rows(), val(*q).cols());
                let (heads, t_len) = (*heads, *seq_len);
                let dh = d / heads;
                let batch = n / t_len;
                let scale = S::one() / S::of_usize(dh).sqrt();
                let tt = t_len * t_len;
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![S::zero(); n * d];
                let mut dk = vec![S::zero(); n * d];
                let mut dv = vec![S::zero(); n * d];
                let mut dp = vec![S::zero(); tt];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = b * t_len * d + h * dh;
                        let p = &probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                        let blk = |data| View { data, offset: base, rows: t_len, cols: dh, rs: d, cs: 1 };
                        gemm(S::one(), View::dense(p, t_len, t_len).t(), blk(g), S::one(), &mut dv, base, d, 1);
                        gemm(S::one(), blk(g), blk(vd).t(), S::zero(), &mut dp, 0, t_len, 1);
                        for t in 0..t_len {
                            let prow = &p[t * t_len..(t + 1) * t_len];
                            let drow = &mut dp[t * t_len..(t + 1) * t_len];
                            let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<S>();
                            for (dx, &px) in drow.iter_mut().zip(prow) {
                                *dx = px * (*dx - dot) * scale;
                            }
                        }
                        let ds = View::dense(&dp[..], t_len, t_len);
                        gemm(S::one(), ds, blk(kd), S::one(), &mut dq, base, d, 1);
                        gemm(S::one(), ds.t(), blk(qd), S::one(), &mut dk, base, d, 1);
                    }
                }
                for (var, src) in [(*q, &dq), (*k, &dk), (*v, &dv)] {
                    acc!(var, |buf| {
                        buf.iter_mut().zip(src.iter()).for_each(|(o, &x)| *o = *o + x);
                    });
                }
            }
            Op::Gather { x, idx } => {
                let c = val(*x).cols();
                acc!(*x, |buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[src * c + j] = buf[src * c + j] + g[r * c + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let len = nodes[i].value.cols();
                acc!(*x, |buf| {
                    for (r, row) in g.chunks(len.max(1)).enumerate() {
                        for (j, &v) in row.iter().enumerate() {
                            buf[r * c + start + j] = buf[r * c + start + j] + v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    acc!(p, |buf| {
                        for (r, row) in g.chunks(total).enumerate() {
                            for j in 0..c {
                                buf[r * c + j] = buf[r * c + j] + row[off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::StraightThrough(z) => {
                acc!(*z, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &v)| *o = *o + v);
                });
            }
            Op::Sum(x) => {
                acc!(*x, |buf| {
                    buf.iter_mut().for_each(|o| *o = *o + g[0]);
                });
            }
            Op::SumSquares(x) => {
                let two = S::of(2.0) * g[0];
                acc!(*x, |buf| {
                    for (o, &v) in buf.iter_mut().zip(val(*x).data()) {
                        *o = *o + two * v;
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, scale, mask } => {
                let k = val(*logits).cols();
                let s = g[0] * *scale;
                acc!(*logits, |buf| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..k {
                            let mut d = probs[r * k + j];
                            if j == targets[r] {
                                d = d - S::one();
                            }
                            buf[r * k + j] = buf[r * k + j] + s * d;
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let s = g[0] / S::of_usize(targets.len());
                acc!(*logits, |buf| {
                    for ((o, &x), &y) in buf.iter_mut().zip(val(*logits).data()).zip(targets) {
                        let sig = S::one() / (S::one() + (-x).exp());
                        *o = *o + s * (sig - y);
                    }
                });
            }
            Op::MeanSegments { x, segments } => {
                let c = val(*x).cols();
                acc!(*x, |buf| {
                    for (si, &(s, e)) in segments.iter().enumerate() {
                        let w = S::one() / S::of_usize(e - s);
                        for row in s..e {
                            for j in 0..c {
                                buf[row * c + j] = buf[row * c + j] + g[si * c + j] * w;
                            }
                        }
                    }
                });
            }
            Op::MaskRows { x, fill, rows } => {
                let d = val(*x).cols();
                acc!(*x, |buf| {
                    for (r, &m) in rows.iter().enumerate() {
                        if !m {
                            for j in 0..d {
                                buf[r * d + j] = buf[r * d + j] + g[r * d + j];
                            }
                        }
                    }
                });
                acc!(*fill, |buf| {
                    for (r, &m) in rows.iter().enumerate() {
                        if m {
                            for j in 0..d {
                                buf[j] = buf[j] + g[r * d + j];
                            }
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(t(1, 4, &[0.0; 4]));
        let ce = g.cross_entropy(l, &[2], &[true], Reduction::Mean).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);

        let l = g.constant(t(1, 3, &[1.0, 2.0, 3.0]));
        let ce = g.cross_entropy(l, &[2], &[true], Reduction::Mean).unwrap();
        assert!((g.value(ce).item() - 0.40760596444).abs() < 1e-10);

        let l = g.constant(t(1, 3, &[0.0, 1e4, 0.0]));
        let ce = g.cross_entropy(l, &[1], &[true], Reduction::Mean).unwrap();
        assert!(g.value(ce).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_unmasked_rows() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(t(2, 2, &[5.0, -5.0, 0.0, 0.0]));
        let ce = g.cross_entropy(l, &[1, 0], &[false, true], Reduction::Mean).unwrap();
        assert!((g.value(ce).item() - 2f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(l, &[1, 0], &[false, false], Reduction::Mean).is_err());
        assert!(g.cross_entropy(l, &[2, 0], &[true, true], Reduction::Mean).is_err());
    }

    #[test]
    fn causal_attention_weights_are_lower_triangular_and_normalized() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = g.constant(t(6, 4, &data));
        let a = g.attention(x, x, x, 2, 3, &AttnMask::Causal).unwrap();
        let p = g.attention_probs(a).unwrap();
        for m in p.chunks(9) {
            for r in 0..3 {
                let row = &m[r * 3..r * 3 + 3];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (c, &w) in row.iter().enumerate() {
                    if c > r {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut g = Graph::<f64>::new();
        let row = [0.3, -0.2, 0.9, 0.1];
        let data: Vec<f64> = row.iter().cycle().take(16).copied().collect();
        let x = g.constant(t(4, 4, &data));
        let a = g.attention(x, x, x, 2, 4, &AttnMask::Full).unwrap();
        let out = g.value(a);
        for r in 1..4 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(2, 3, &[0.0; 6]));
        let b = g.constant(t(2, 3, &[0.0; 6]));
        assert!(g.matmul(a, b).is_err());
        assert!(g.attention(a, a, a, 2, 2, &AttnMask::Full).is_err());
        assert!(g.attention(a, a, a, 3, 4, &AttnMask::Full).is_err());
    }

    #[test]
    fn repeated_param_reference_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(1, 1, &[3.0]));
        let mut g = Graph::with_params(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let m = g.mul(a, b).unwrap();
        let loss = g.sum(m);
        g.backward(loss).unwrap();
        assert_eq!(g.param_grads().get(w).unwrap(), &[6.0]);
    }
}
