//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and enough saved state to
//! compute its vector-Jacobian product. Nodes only reference earlier nodes, so
//! the tape order is a topological order and backward is one reverse sweep.

use super::kernels::{self, Strides};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows `[start, start + len)` forming one causal sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBroadcast { x: Var, bias: Var },
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax { x: Var, tau: f64 },
    LogSoftmax { x: Var, tau: f64 },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlRows {
        p: Var,
        q: Var,
        pf: Vec<f64>,
        qf: Vec<f64>,
    },
    CausalAttention {
        qkv: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<Vec<f64>>,
    },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Dot(a, b) => vec![*a, *b],
            Scale(x, _) | Sum(x) | Mean(x) | Gelu(x) | Transpose(x) | Reshape(x) => vec![*x],
            AddRowBroadcast { x, bias } => vec![*x, *bias],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Embedding { table, .. } => vec![*table],
            Softmax { x, .. } | LogSoftmax { x, .. } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
            KlRows { p, q, .. } => vec![*p, *q],
            CausalAttention { qkv, .. } => vec![*qkv],
            SliceRows { x, .. } | GatherRows { x, .. } | L2NormalizeRows { x, .. } => vec![*x],
            ConcatRows(xs) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Values are immutable once recorded.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push_raw(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Discards every node recorded at or after index `len`, along with all
    /// gradients. Used to reuse bound weights across repeated forward passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
    }

    /// Drops all accumulated gradients.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        let rg = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        value.set_requires_grad(rg);
        self.push_raw(value, op, rg)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // ── forward ops ──────────────────────────────────────────────────────

    /// `a · b` for matrices `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            Strides::row_major(k),
            self.value(b).data(),
            Strides::row_major(n),
            0.0,
            &mut out,
            Strides::row_major(n),
        );
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul { a, b, trans_b: false }))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt {m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            Strides::row_major(k),
            self.value(b).data(),
            Strides::transposed(k),
            0.0,
            &mut out,
            Strides::row_major(n),
        );
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul { a, b, trans_b: true }))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * c).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Scale(x, c))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "bias of length {} for width {n}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (v, &bb) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *v += bb;
            }
        }
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::AddRowBroadcast { x, bias }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Shape("dot of unequal lengths".into()));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Gelu(x))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::Shape("layer_norm affine width".into()));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let xh = (row[c] - mu) * is;
                xhat[r * n + c] = xh;
                out[r * n + c] = xh * g[c] + b[c];
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table` (`V×d`) by token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("token id {id} >= vocabulary {v}")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    fn check_tau(tau: f64) -> Result<()> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
        }
        Ok(())
    }

    /// Row-wise `softmax(x / tau)`; vectors are treated as a single row.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        Self::check_tau(tau)?;
        let src = self.value(x);
        let n = src.cols();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::softmax_in_place(row, tau);
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax { x, tau }))
    }

    pub fn log_softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        Self::check_tau(tau)?;
        let src = self.value(x);
        let n = src.cols();
        let mut data = vec![0.0; src.len()];
        for (row, out) in src.data().chunks(n).zip(data.chunks_mut(n)) {
            kernels::log_softmax_into(row, tau, out);
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::LogSoftmax { x, tau }))
    }

    /// Mean over the selected `rows` of `-ln softmax(logits[row])[target]`.
    pub fn cross_entropy(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits)?;
        if rows.len() != targets.len() {
            return Err(Error::Shape("cross_entropy rows/targets length".into()));
        }
        if rows.is_empty() {
            return Err(Error::Input("cross_entropy over zero positions".into()));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; rows.len() * n];
        let mut total = 0.0;
        let mut lsm = vec![0.0; n];
        for (i, (&r, &t)) in rows.iter().zip(targets).enumerate() {
            if r >= m || t >= n {
                return Err(Error::Input(format!("cross_entropy index ({r}, {t}) out of range")));
            }
            let row = &src[r * n..(r + 1) * n];
            kernels::log_softmax_into(row, 1.0, &mut lsm);
            total -= lsm[t];
            for (p, &l) in probs[i * n..(i + 1) * n].iter_mut().zip(&lsm) {
                *p = l.exp();
            }
        }
        let value = total / rows.len() as f64;
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Per-row KL(p‖q) on probability rows, with probability flooring.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "kl_rows")?;
        let tp = self.value(p);
        let n = tp.cols();
        let m = tp.rows();
        let mut pf = Vec::with_capacity(tp.len());
        let mut qf = Vec::with_capacity(tp.len());
        let mut out = Vec::with_capacity(m);
        for (pr, qr) in tp.data().chunks(n).zip(self.value(q).data().chunks(n)) {
            let a = kernels::floor_probs(pr);
            let b = kernels::floor_probs(qr);
            out.push(kernels::kl_row(pr, &a, &b));
            pf.extend(a);
            qf.extend(b);
        }
        let t = Tensor::from_vec(out);
        Ok(self.push(t, Op::KlRows { p, q, pf, qf }))
    }

    /// Multi-head causal self-attention over packed `[q | k | v]` rows.
    ///
    /// `qkv` is `N×3d`; attention never crosses segment boundaries and row `i`
    /// of a segment only sees rows `≤ i` of that segment.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize, segments: &[Segment]) -> Result<Var> {
        let (rows, w) = self.dims2(qkv)?;
        if heads == 0 || w % (3 * heads) != 0 {
            return Err(Error::Shape(format!("qkv width {w} not divisible into {heads} heads")));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if segments.iter().any(|s| s.start + s.len > rows) || covered > rows {
            return Err(Error::Shape("attention segments exceed rows".into()));
        }
        let src = self.value(qkv).data();
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let l = seg.len;
            let base = seg.start * w;
            for h in 0..heads {
                let mut s = vec![0.0; l * l];
                kernels::gemm(
                    l,
                    dh,
                    l,
                    scale,
                    &src[base + h * dh..],
                    Strides(w, 1),
                    &src[base + d + h * dh..],
                    Strides(1, w),
                    0.0,
                    &mut s,
                    Strides::row_major(l),
                );
                for i in 0..l {
                    let row = &mut s[i * l..(i + 1) * l];
                    kernels::softmax_in_place(&mut row[..=i], 1.0);
                    row[i + 1..].fill(0.0);
                }
                kernels::gemm(
                    l,
                    l,
                    dh,
                    1.0,
                    &s,
                    Strides::row_major(l),
                    &src[base + 2 * d + h * dh..],
                    Strides(w, 1),
                    0.0,
                    &mut out[seg.start * d + h * dh..],
                    Strides(d, 1),
                );
                probs.push(s);
            }
        }
        let t = Tensor::matrix(rows, d, out)?;
        Ok(self.push(
            t,
            Op::CausalAttention {
                qkv,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > m {
            return Err(Error::Shape(format!("slice {start}..{end} of {m} rows")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let t = Tensor::matrix(end - start, n, data)?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols() != n {
                return Err(Error::Shape("concat_rows width mismatch".into()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows, n, data)?;
        Ok(self.push(t, Op::ConcatRows(xs.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Shape(format!("gather row {r} of {m}")));
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let t = Tensor::matrix(rows.len(), n, data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = src[r * n + c];
            }
        }
        let t = Tensor::matrix(n, m, data)?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Scales each row to unit L2 norm; rows with norm ≤ 1e-12 are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let n = src.cols();
        let mut data = src.data().to_vec();
        let mut norms = Vec::with_capacity(src.rows());
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("non-finite row norm {norm}")));
            }
            if norm <= 1e-12 {
                return Err(Error::Degenerate(format!(
                    "cannot normalize a row of norm {norm:e}"
                )));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::L2NormalizeRows { x, norms }))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `root`. Replaces any previous gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let mut parts: Vec<Vec<Vec<f64>>> = (0..=root.0).map(|_| Vec::new()).collect();
        parts[root.0].push(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || parts[i].is_empty() {
                continue;
            }
            let g = kernels::order_free_sum(std::mem::take(&mut parts[i]));
            self.vjp(i, &g, &mut parts);
            let shape = self.nodes[i].value.shape().to_vec();
            self.grads[i] = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[f64], parts: &mut [Vec<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut send = |v: Var, grad: Vec<f64>| {
            if nodes[v.0].requires_grad {
                parts[v.0].push(grad);
            }
        };
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = out.cols();
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    // trans_b: B is n×k, dA = G·B; otherwise B is k×n, dA = G·Bᵀ
                    let sb = if *trans_b { Strides::row_major(k) } else { Strides::transposed(n) };
                    kernels::gemm(m, n, k, 1.0, g, Strides::row_major(n), val(*b).data(), sb, 0.0, &mut da, Strides::row_major(k));
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // dB (n×k) = Gᵀ·A
                        kernels::gemm(n, m, k, 1.0, g, Strides::transposed(n), val(*a).data(), Strides::row_major(k), 0.0, &mut db, Strides::row_major(k));
                    } else {
                        // dB (k×n) = Aᵀ·G
                        kernels::gemm(k, m, n, 1.0, val(*a).data(), Strides::transposed(k), g, Strides::row_major(n), 0.0, &mut db, Strides::row_major(n));
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddRowBroadcast { x, bias } => {
                send(*x, g.to_vec());
                if wants(*bias) {
                    let n = out.cols();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(*bias, db);
                }
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Dot(a, b) => {
                if wants(*a) {
                    send(*a, val(*b).data().iter().map(|y| g[0] * y).collect());
                }
                if wants(*b) {
                    send(*b, val(*a).data().iter().map(|y| g[0] * y).collect());
                }
            }
            Op::Gelu(x) => send(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect(),
            ),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gam = val(*gamma).data();
                if wants(*gamma) {
                    let mut dg = vec![0.0; n];
                    for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += grow[c] * xrow[c];
                        }
                    }
                    send(*gamma, dg);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; n];
                    for grow in g.chunks(n) {
                        for c in 0..n {
                            db[c] += grow[c];
                        }
                    }
                    send(*beta, db);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (r, (grow, xrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dxh = grow[c] * gam[c];
                            s1 += dxh;
                            s2 += dxh * xrow[c];
                        }
                        for c in 0..n {
                            let dxh = grow[c] * gam[c];
                            dx[r * n + c] = inv_std[r] / nf * (nf * dxh - s1 - xrow[c] * s2);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                let mut dt = vec![0.0; val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
                send(*table, dt);
            }
            Op::Softmax { x, tau } => {
                let n = out.cols();
                let mut dx = vec![0.0; g.len()];
                for ((grow, yrow), drow) in g.chunks(n).zip(out.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        drow[c] = yrow[c] * (grow[c] - s) / tau;
                    }
                }
                send(*x, dx);
            }
            Op::LogSoftmax { x, tau } => {
                let n = out.cols();
                let mut dx = vec![0.0; g.len()];
                for ((grow, yrow), drow) in g.chunks(n).zip(out.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let s: f64 = grow.iter().sum();
                    for c in 0..n {
                        drow[c] = (grow[c] - yrow[c].exp() * s) / tau;
                    }
                }
                send(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let n = val(*logits).cols();
                let mut dx = vec![0.0; val(*logits).len()];
                let w = g[0] / rows.len() as f64;
                for (i, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                    let p = &probs[i * n..(i + 1) * n];
                    let drow = &mut dx[r * n..(r + 1) * n];
                    for c in 0..n {
                        drow[c] += w * p[c];
                    }
                    drow[t] -= w;
                }
                send(*logits, dx);
            }
            Op::KlRows { p, q, pf, qf } => {
                let n = val(*p).cols();
                let praw = val(*p).data();
                if wants(*p) {
                    let mut dp = vec![0.0; praw.len()];
                    for (r, gr) in g.iter().enumerate() {
                        for c in r * n..(r + 1) * n {
                            if praw[c] > 0.0 {
                                dp[c] = gr * (pf[c].ln() - qf[c].ln() + 1.0);
                            }
                        }
                    }
                    send(*p, dp);
                }
                if wants(*q) {
                    let mut dq = vec![0.0; praw.len()];
                    for (r, gr) in g.iter().enumerate() {
                        for c in r * n..(r + 1) * n {
                            if praw[c] > 0.0 {
                                dq[c] = -gr * pf[c] / qf[c];
                            }
                        }
                    }
                    send(*q, dq);
                }
            }
            Op::CausalAttention {
                qkv,
                heads,
                segments,
                probs,
            } => {
                let src = val(*qkv).data();
                let w = val(*qkv).cols();
                let d = w / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = vec![0.0; src.len()];
                let mut idx = 0;
                for seg in segments {
                    let l = seg.len;
                    let base = seg.start * w;
                    let gbase = seg.start * d;
                    for h in 0..*heads {
                        let p = &probs[idx];
                        idx += 1;
                        // dV = Pᵀ·dO
                        kernels::gemm(l, l, dh, 1.0, p, Strides::transposed(l), &g[gbase + h * dh..], Strides(d, 1), 0.0, &mut dqkv[base + 2 * d + h * dh..], Strides(w, 1));
                        // dP = dO·Vᵀ
                        let mut dp = vec![0.0; l * l];
                        kernels::gemm(l, dh, l, 1.0, &g[gbase + h * dh..], Strides(d, 1), &src[base + 2 * d + h * dh..], Strides(1, w), 0.0, &mut dp, Strides::row_major(l));
                        // dS = P ⊙ (dP − rowsum(P ⊙ dP)), masked entries have P = 0
                        for r in 0..l {
                            let prow = &p[r * l..(r + 1) * l];
                            let drow = &mut dp[r * l..(r + 1) * l];
                            let s: f64 = prow[..=r].iter().zip(&drow[..=r]).map(|(a, b)| a * b).sum();
                            for c in 0..=r {
                                drow[c] = prow[c] * (drow[c] - s);
                            }
                            drow[r + 1..].fill(0.0);
                        }
                        // dQ = scale·dS·K ; dK = scale·dSᵀ·Q
                        kernels::gemm(l, l, dh, scale, &dp, Strides::row_major(l), &src[base + d + h * dh..], Strides(w, 1), 0.0, &mut dqkv[base + h * dh..], Strides(w, 1));
                        kernels::gemm(l, l, dh, scale, &dp, Strides::transposed(l), &src[base + h * dh..], Strides(w, 1), 0.0, &mut dqkv[base + d + h * dh..], Strides(w, 1));
                    }
                }
                send(*qkv, dqkv);
            }
            Op::SliceRows { x, start } => {
                let n = out.cols();
                let mut dx = vec![0.0; val(*x).len()];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                send(*x, dx);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = val(x).len();
                    send(x, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = out.cols();
                let mut dx = vec![0.0; val(*x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..n {
                        dx[r * n + c] += g[i * n + c];
                    }
                }
                send(*x, dx);
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = g[c * m + r];
                    }
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::L2NormalizeRows { x, norms } => {
                let n = out.cols();
                let mut dx = vec![0.0; g.len()];
                for (r, ((grow, yrow), drow)) in g
                    .chunks(n)
                    .zip(out.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                    .enumerate()
                {
                    let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        drow[c] = (grow[c] - yrow[c] * s) / norms[r];
                    }
                }
                send(*x, dx);
            }
        }
    }
}
