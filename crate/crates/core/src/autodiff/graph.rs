use super::{AutodiffError, Tensor};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};

/// Stabiliser added under the square root in [`Graph::rms_norm`].
pub const RMS_NORM_EPS: f64 = 1e-5;
/// Frequency base of the rotary position encoding.
pub const ROPE_BASE: f64 = 10_000.0;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a `[batch * seq, hidden]` activation is split into attention heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    Rope { x: Var, layout: AttentionLayout },
    CausalAttention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// A tape of tensor operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Adds `delta` into `slot`, moving it in when the slot is empty.
fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += *d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are only tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a @ b` for `a: [.., k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(a, b, false)
    }

    /// `x @ w^T` for `x: [.., in]` and `w: [out, in]`, i.e. a bias-free linear layer.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, AutodiffError> {
        self.matmul_impl(x, w, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() {
            return Err(mismatch("matmul", format!("{:?} @ {:?}", av.shape(), bv.shape())));
        }
        let (m, k) = (av.rows(), av.last_dim());
        let (bk, n) = if b_transposed { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        if k != bk {
            return Err(mismatch(
                "matmul",
                format!("{:?} @ {:?}{}", av.shape(), bv.shape(), if b_transposed { "^T" } else { "" }),
            ));
        }
        let mut out_shape = av.shape()[..av.shape().len() - 1].to_vec();
        out_shape.push(n);
        let mut out = Tensor::zeros(&out_shape);
        let bref = if b_transposed {
            MatRef::row_major(bv.data(), n, k).t()
        } else {
            MatRef::row_major(bv.data(), k, n)
        };
        gemm(T::one(), MatRef::row_major(av.data(), m, k), bref, T::zero(), MatMut::row_major(out.data_mut(), m, n));
        self.push("matmul", out, Op::MatMul { a, b, b_transposed }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(|x| {
            let xf = x.as_f64();
            T::from_f64_lossy(xf * sigmoid(xf))
        });
        self.push("silu", out, Op::Silu(a), &[a])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let w = av.last_dim();
        let mut out = Tensor::zeros(av.shape());
        for (src, dst) in av.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
            softmax_row(src, dst);
        }
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// `x / sqrt(mean(x^2) + eps) * gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var, AutodiffError> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let d = xv.last_dim();
        if gv.shape() != [d] {
            return Err(mismatch("rms_norm", format!("x {:?}, gain {:?}", xv.shape(), gv.shape())));
        }
        let mut out = Tensor::zeros(xv.shape());
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for (row, dst) in xv.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
            let ms = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
            inv_rms.push(inv);
            let inv_t = T::from_f64_lossy(inv);
            for ((o, &v), &g) in dst.iter_mut().zip(row).zip(gv.data()) {
                *o = v * inv_t * g;
            }
        }
        self.push("rms_norm", out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Gathers rows of `table: [vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(mismatch("embedding", format!("table {:?}", tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (&id, dst) in ids.iter().zip(out.data_mut().chunks_mut(d)) {
            if id >= vocab {
                return Err(AutodiffError::IndexOutOfRange { op: "embedding", index: id, bound: vocab });
            }
            dst.copy_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        self.push("embedding", out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Mean token cross-entropy of `logits: [n, vocab]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        if lv.rows() != targets.len() {
            return Err(mismatch("cross_entropy", format!("{} rows, {} targets", lv.rows(), targets.len())));
        }
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for ((row, dst), &t) in lv.data().chunks(vocab).zip(probs.chunks_mut(vocab)).zip(targets) {
            if t >= vocab {
                return Err(AutodiffError::IndexOutOfRange { op: "cross_entropy", index: t, bound: vocab });
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t].as_f64();
            for (p, v) in dst.iter_mut().zip(row) {
                *p = T::from_f64_lossy((v.as_f64() - lse).exp());
            }
        }
        let loss = T::from_f64_lossy(total / targets.len().max(1) as f64);
        self.push("cross_entropy", Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        self.push("sum", Tensor::scalar(T::from_f64_lossy(s)), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let s: f64 = av.data().iter().map(|v| v.as_f64()).sum::<f64>() / av.len().max(1) as f64;
        self.push("mean", Tensor::scalar(T::from_f64_lossy(s)), Op::Mean(a), &[a])
    }

    fn check_layout(&self, op: &'static str, x: Var, layout: AttentionLayout) -> Result<usize, AutodiffError> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let ok = layout.heads > 0
            && d.is_multiple_of(layout.heads)
            && (d / layout.heads).is_multiple_of(2)
            && xv.rows() == layout.batch * layout.seq;
        if !ok {
            return Err(mismatch(op, format!("{:?} with {layout:?}", xv.shape())));
        }
        Ok(d / layout.heads)
    }

    /// Rotary position encoding on every head of `x: [batch * seq, hidden]`.
    /// Consecutive channel pairs of a head rotate by `pos * base^(-2i / head_dim)`.
    pub fn rope(&mut self, x: Var, layout: AttentionLayout) -> Result<Var, AutodiffError> {
        let head_dim = self.check_layout("rope", x, layout)?;
        let xv = self.value(x);
        let mut out = xv.clone();
        rotate(out.data_mut(), xv.last_dim(), layout, head_dim, 1.0);
        self.push("rope", out, Op::Rope { x, layout }, &[x])
    }

    /// Multi-head causal self-attention of `[batch * seq, hidden]` projections.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var, AutodiffError> {
        let head_dim = self.check_layout("causal_attention", q, layout)?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(mismatch("causal_attention", format!("{:?} {:?} {:?}", qv.shape(), kv.shape(), vv.shape())));
        }
        let d = qv.last_dim();
        let AttentionLayout { batch, seq, heads } = layout;
        let scale = T::from_f64_lossy(1.0 / (head_dim as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = Tensor::zeros(qv.shape());
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * head_dim;
                let view = |data| MatRef { data, offset: off, rows: seq, cols: head_dim, row_stride: d, col_stride: 1 };
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(scale, view(qv.data()), view(kv.data()).t(), T::zero(), MatMut::row_major(p, seq, seq));
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let (visible, masked) = row.split_at_mut(i + 1);
                    let scores: Vec<T> = visible.to_vec();
                    softmax_row(&scores, visible);
                    masked.fill(T::zero());
                }
                let dst = MatMut { data: out.data_mut(), offset: off, rows: seq, cols: head_dim, row_stride: d, col_stride: 1 };
                gemm(T::one(), MatRef::row_major(p, seq, seq), view(vv.data()), T::zero(), dst);
            }
        }
        self.push("causal_attention", out, Op::CausalAttention { q, k, v, layout, probs }, &[q, k, v])
    }

    /// Back-propagates from a scalar `loss`, accumulating into the `grad` of
    /// every leaf that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul { a, b, b_transposed } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.rows(), av.last_dim());
                    let n = g.last_dim();
                    let gref = MatRef::row_major(g.data(), m, n);
                    if rg(*a) {
                        let mut da = Tensor::zeros(av.shape());
                        // b is [k, n] or, transposed, [n, k]
                        let bt = if *b_transposed {
                            MatRef::row_major(bv.data(), n, k)
                        } else {
                            MatRef::row_major(bv.data(), k, n).t()
                        };
                        gemm(T::one(), gref, bt, T::zero(), MatMut::row_major(da.data_mut(), m, k));
                        accumulate(&mut grads[a.0], da);
                    }
                    if rg(*b) {
                        let mut db = Tensor::zeros(bv.shape());
                        let aref = MatRef::row_major(av.data(), m, k);
                        if *b_transposed {
                            gemm(T::one(), gref.t(), aref, T::zero(), MatMut::row_major(db.data_mut(), n, k));
                        } else {
                            gemm(T::one(), aref.t(), gref, T::zero(), MatMut::row_major(db.data_mut(), k, n));
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if rg(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if rg(*a) {
                        let d = Tensor::from_fn(av.shape(), |j| g.data()[j] * bv.data()[j]);
                        accumulate(&mut grads[a.0], d);
                    }
                    if rg(*b) {
                        let d = Tensor::from_fn(bv.shape(), |j| g.data()[j] * av.data()[j]);
                        accumulate(&mut grads[b.0], d);
                    }
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    accumulate(&mut grads[a.0], g.map(|x| x * f));
                }
                Op::Silu(a) => {
                    let av = val(*a);
                    let d = Tensor::from_fn(av.shape(), |j| {
                        let x = av.data()[j].as_f64();
                        let s = sigmoid(x);
                        g.data()[j] * T::from_f64_lossy(s * (1.0 + x * (1.0 - s)))
                    });
                    accumulate(&mut grads[a.0], d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let w = y.last_dim();
                    let mut d = Tensor::zeros(y.shape());
                    for ((yr, gr), dr) in y.data().chunks(w).zip(g.data().chunks(w)).zip(d.data_mut().chunks_mut(w)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        let dot = T::from_f64_lossy(dot);
                        for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (xv, gv) = (val(*x), val(*gain));
                    let dim = xv.last_dim();
                    if rg(*x) {
                        let mut dx = Tensor::zeros(xv.shape());
                        for (((xr, gr), dr), &inv) in
                            xv.data().chunks(dim).zip(g.data().chunks(dim)).zip(dx.data_mut().chunks_mut(dim)).zip(inv_rms)
                        {
                            let proj: f64 = xr
                                .iter()
                                .zip(gr)
                                .zip(gv.data())
                                .map(|((xj, dyj), gj)| xj.as_f64() * dyj.as_f64() * gj.as_f64())
                                .sum();
                            let coef = proj * inv.powi(3) / dim as f64;
                            for (j, o) in dr.iter_mut().enumerate() {
                                let v = inv * gr[j].as_f64() * gv.data()[j].as_f64() - xr[j].as_f64() * coef;
                                *o = T::from_f64_lossy(v);
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                    if rg(*gain) {
                        let mut acc = vec![0.0f64; dim];
                        for ((xr, gr), &inv) in xv.data().chunks(dim).zip(g.data().chunks(dim)).zip(inv_rms) {
                            for j in 0..dim {
                                acc[j] += gr[j].as_f64() * xr[j].as_f64() * inv;
                            }
                        }
                        let dg = Tensor::new(vec![dim], acc.into_iter().map(T::from_f64_lossy).collect())?;
                        accumulate(&mut grads[gain.0], dg);
                    }
                }
                Op::Embedding { table, ids } => {
                    let tv = val(*table);
                    let d = tv.shape()[1];
                    let mut dt = Tensor::zeros(tv.shape());
                    for (&id, gr) in ids.iter().zip(g.data().chunks(d)) {
                        for (o, &v) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(gr) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let lv = val(*logits);
                    let vocab = lv.last_dim();
                    let coef = g.item() / T::from_usize_lossy(targets.len().max(1));
                    let mut d = Tensor::new(lv.shape().to_vec(), probs.clone())?;
                    for (row, &t) in d.data_mut().chunks_mut(vocab).zip(targets) {
                        row[t] -= T::one();
                        for v in row.iter_mut() {
                            *v *= coef;
                        }
                    }
                    accumulate(&mut grads[logits.0], d);
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    accumulate(&mut grads[a.0], Tensor::full(val(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let av = val(*a);
                    let gv = g.item() / T::from_usize_lossy(av.len().max(1));
                    accumulate(&mut grads[a.0], Tensor::full(av.shape(), gv));
                }
                Op::Rope { x, layout } => {
                    let mut d = g;
                    let dim = d.last_dim();
                    rotate(d.data_mut(), dim, *layout, dim / layout.heads, -1.0);
                    accumulate(&mut grads[x.0], d);
                }
                Op::CausalAttention { q, k, v, layout, probs } => {
                    let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                    let d = qv.last_dim();
                    let AttentionLayout { batch, seq, heads } = *layout;
                    let head_dim = d / heads;
                    let scale = T::from_f64_lossy(1.0 / (head_dim as f64).sqrt());
                    let mut dq = rg(*q).then(|| Tensor::zeros(qv.shape()));
                    let mut dk = rg(*k).then(|| Tensor::zeros(kv.shape()));
                    let mut dv = rg(*v).then(|| Tensor::zeros(vv.shape()));
                    let mut dp = vec![T::zero(); seq * seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let off = b * seq * d + h * head_dim;
                            let view =
                                |data| MatRef { data, offset: off, rows: seq, cols: head_dim, row_stride: d, col_stride: 1 };
                            let view_mut = |data| MatMut { data, offset: off, rows: seq, cols: head_dim, row_stride: d, col_stride: 1 };
                            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                            let pref = MatRef::row_major(p, seq, seq);
                            let go = view(g.data());
                            if let Some(dv) = dv.as_mut() {
                                gemm(T::one(), pref.t(), go, T::one(), view_mut(dv.data_mut()));
                            }
                            gemm(T::one(), go, view(vv.data()).t(), T::zero(), MatMut::row_major(&mut dp, seq, seq));
                            for i in 0..seq {
                                let pr = &p[i * seq..(i + 1) * seq];
                                let dr = &mut dp[i * seq..(i + 1) * seq];
                                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                                let dot = T::from_f64_lossy(dot);
                                for (dv, &pv) in dr.iter_mut().zip(pr) {
                                    *dv = pv * (*dv - dot);
                                }
                            }
                            let ds = MatRef::row_major(&dp, seq, seq);
                            if let Some(dq) = dq.as_mut() {
                                gemm(scale, ds, view(kv.data()), T::one(), view_mut(dq.data_mut()));
                            }
                            if let Some(dk) = dk.as_mut() {
                                gemm(scale, ds.t(), view(qv.data()), T::one(), view_mut(dk.data_mut()));
                            }
                        }
                    }
                    for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if let Some(d) = d {
                            accumulate(&mut grads[var.0], d);
                        }
                    }
                }
            }
        }

        for (i, g) in leaf_grads {
            accumulate(&mut self.nodes[i].grad, g);
        }
        Ok(())
    }
}

fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let mut sum = 0.0f64;
    for (o, v) in dst.iter_mut().zip(src) {
        let e = (v.as_f64() - max).exp();
        sum += e;
        *o = T::from_f64_lossy(e);
    }
    let inv = T::from_f64_lossy(1.0 / sum);
    for o in dst.iter_mut() {
        *o *= inv;
    }
}

/// In-place rotary rotation; `direction = -1.0` applies the inverse (the
/// transpose), which is also the backward map.
fn rotate<T: Scalar>(data: &mut [T], d: usize, layout: AttentionLayout, head_dim: usize, direction: f64) {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64)).collect();
    for (r, row) in data.chunks_mut(d).enumerate() {
        let pos = (r % layout.seq) as f64;
        for (i, &freq) in freqs.iter().enumerate() {
            let (sin, cos) = (pos * freq * direction).sin_cos();
            let (s, c) = (T::from_f64_lossy(sin), T::from_f64_lossy(cos));
            for h in 0..layout.heads {
                let j = h * head_dim + 2 * i;
                let (x0, x1) = (row[j], row[j + 1]);
                row[j] = x0 * c - x1 * s;
                row[j + 1] = x0 * s + x1 * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::full(&[2, 5], 3.7));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn rms_norm_of_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f32>::zeros(&[3, 4]));
        let gain = g.constant(Tensor::full(&[4], 1.5f32));
        let y = g.rms_norm(x, gain).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[4, 256]));
        let loss = g.cross_entropy(x, &[0, 17, 255, 3]).unwrap();
        assert!((g.value(loss).item() - 256f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(g.backward(x), Err(AutodiffError::NotScalar(vec![2])));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2, 3], &[0.0; 6]));
        assert!(matches!(g.matmul(a, b), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));
        let c = g.constant(t(&[3], &[0.0; 3]));
        assert!(g.add(a, c).is_err());
        let table = g.constant(t(&[2, 3], &[0.0; 6]));
        assert!(matches!(g.embedding(table, &[2]), Err(AutodiffError::IndexOutOfRange { .. })));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[f64::MAX, 1.0]));
        assert_eq!(g.scale(a, 10.0), Err(AutodiffError::NonFinite { op: "scale" }));
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.linear(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn attention_is_causal() {
        let layout = AttentionLayout { batch: 1, seq: 4, heads: 2 };
        let base: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |data: &[f64]| {
            let mut g = Graph::new();
            let q = g.constant(t(&[4, 4], data));
            let y = g.causal_attention(q, q, q, layout).unwrap();
            g.value(y).clone()
        };
        let a = run(&base);
        let mut moved = base.clone();
        moved[2 * 4 + 1] += 1.0; // token 2
        let b = run(&moved);
        for pos in 0..4 {
            let changed = (0..4).any(|c| a.data()[pos * 4 + c] != b.data()[pos * 4 + c]);
            assert_eq!(changed, pos >= 2, "position {pos}");
        }
    }

    #[test]
    fn rope_preserves_norm_and_leaves_position_zero() {
        let layout = AttentionLayout { batch: 2, seq: 3, heads: 2 };
        let data: Vec<f64> = (0..24).map(|i| i as f64 - 7.0).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[6, 4], &data));
        let y = g.rope(x, layout).unwrap();
        let out = g.value(y);
        assert_eq!(&out.data()[..4], &data[..4]);
        for r in 0..6 {
            let n0: f64 = data[r * 4..r * 4 + 4].iter().map(|v| v * v).sum();
            let n1: f64 = out.data()[r * 4..r * 4 + 4].iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-9);
        }
    }
}
