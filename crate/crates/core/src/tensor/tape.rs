//! Recorded-operation tape and backward rules.

use std::sync::Arc;

use super::{Tensor, TensorError};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: f64 },
    Gelu { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    CrossEntropy { logits: TensorId, labels: Arc<Vec<usize>> },
    Gather { a: TensorId, map: Arc<Vec<usize>> },
    ConcatRows { parts: Vec<TensorId> },
    Transpose { a: TensorId },
    SumAll { a: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of tensors and the operations that produced them.
///
/// Nodes are stored in topological order by construction, so the backward
/// pass is a single reverse sweep. A tape and its tensors form one
/// single-threaded unit; independent tapes may run on separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    flops: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of floating-point operations recorded by forward ops so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf node. Its `requires_grad` flag decides
    /// whether `backward` populates a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, mut tensor: Tensor) -> TensorId {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].tensor.values()
    }

    pub fn dims(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.dims()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Clone the tensor out of the tape, attaching its gradient if backward
    /// has produced one.
    pub fn extract(&self, id: TensorId) -> Tensor {
        let mut t = self.nodes[id.0].tensor.clone();
        if let Some(g) = self.grad(id) {
            t.set_grad(g.to_vec());
        }
        t
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op, needs_grad });
        self.grads.push(None);
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// `a[m×k] · b[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ad.to_vec(),
                right: bd.to_vec(),
            });
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let out = mm(self.values(a), self.values(b), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::new(vec![m, n], out).expect("matmul output");
        Ok(self.push(t, Op::MatMul { a, b }, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Multiply every element by a fixed scalar.
    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let out: Vec<f64> = self.values(a).iter().map(|v| v * factor).collect();
        self.flops += out.len() as u64;
        let needs = self.needs(a);
        let t = Tensor::new(self.dims(a).to_vec(), out).expect("scale output");
        self.push(t, Op::Scale { a, factor }, needs)
    }

    /// Pointwise op where `b` either matches `a`'s shape, is a single
    /// scalar, or is a rank-1 vector broadcast over `a`'s trailing axis.
    fn elementwise(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let mode = broadcast_mode(self.dims(a), self.dims(b)).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: name,
                left: self.dims(a).to_vec(),
                right: self.dims(b).to_vec(),
            }
        })?;
        let av = self.values(a);
        let bv = self.values(b);
        let out: Vec<f64> = match mode {
            Broadcast::Equal => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::TrailingVec => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % bv.len()]))
                .collect(),
        };
        self.flops += out.len() as u64;
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::new(self.dims(a).to_vec(), out).expect("elementwise output");
        Ok(self.push(t, op, needs))
    }

    /// Exact Gaussian-error-linear unit, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.values(a).iter().map(|&x| gelu_scalar(x)).collect();
        self.flops += 8 * out.len() as u64;
        let needs = self.needs(a);
        let t = Tensor::new(self.dims(a).to_vec(), out).expect("gelu output");
        self.push(t, Op::Gelu { a }, needs)
    }

    /// Softmax along `axis`, with the per-slice maximum subtracted before
    /// exponentiation.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let dims = self.dims(a).to_vec();
        if axis >= dims.len() {
            return Err(TensorError::InvalidAxis { axis, shape: dims });
        }
        let out = softmax_values(self.values(a), &dims, axis);
        self.flops += 5 * out.len() as u64;
        let needs = self.needs(a);
        let t = Tensor::new(dims, out).expect("softmax output");
        Ok(self.push(t, Op::Softmax { a, axis }, needs))
    }

    /// Normalize each slice along the last axis to zero mean and unit
    /// population variance, then apply `gamma·x̂ + beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::NonPositiveEps { eps });
        }
        let dims = self.dims(x).to_vec();
        let d = *dims.last().expect("nonempty shape");
        for (name, p) in [("layer_norm gamma", gamma), ("layer_norm beta", beta)] {
            let pd = self.dims(p);
            if pd.len() != 1 || pd[0] != d {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    left: dims,
                    right: pd.to_vec(),
                });
            }
        }
        let xv = self.values(x);
        let gv = self.values(gamma);
        let bv = self.values(beta);
        let mut out = vec![0.0; xv.len()];
        for (row, orow) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                orow[i] = (row[i] - mean) * inv_std * gv[i] + bv[i];
            }
        }
        self.flops += 8 * out.len() as u64;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let t = Tensor::new(dims, out).expect("layer_norm output");
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, eps }, needs))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId, TensorError> {
        let dims = self.dims(logits);
        if dims.len() != 2 || dims[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: dims.to_vec(),
                right: vec![labels.len()],
            });
        }
        let classes = dims[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes });
        }
        let lv = self.values(logits);
        let mut total = 0.0;
        for (row, &label) in lv.chunks_exact(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total -= row[label] - max - lse;
        }
        let loss = total / labels.len() as f64;
        self.flops += 4 * lv.len() as u64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: Arc::new(labels.to_vec()) },
            needs,
        ))
    }

    /// Reorder/duplicate elements: `out[i] = a[map[i]]`. Backward
    /// scatter-adds, so the same source element may appear many times.
    pub fn gather(
        &mut self,
        a: TensorId,
        map: Arc<Vec<usize>>,
        out_dims: Vec<usize>,
    ) -> Result<TensorId, TensorError> {
        let av = self.values(a);
        let expected: usize = out_dims.iter().product();
        if map.len() != expected {
            return Err(TensorError::LengthMismatch {
                len: map.len(),
                expected,
                shape: out_dims,
            });
        }
        if let Some(&bad) = map.iter().find(|&&i| i >= av.len()) {
            return Err(TensorError::GatherOutOfBounds { index: bad, len: av.len() });
        }
        let out: Vec<f64> = map.iter().map(|&i| av[i]).collect();
        let needs = self.needs(a);
        let t = Tensor::new(out_dims, out)?;
        Ok(self.push(t, Op::Gather { a, map }, needs))
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyConcat)?;
        let cols = match self.dims(first) {
            [_, c] => *c,
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: other.to_vec(),
                    right: vec![],
                })
            }
        };
        let mut rows = 0;
        for &p in parts {
            match self.dims(p) {
                [r, c] if *c == cols => rows += r,
                other => {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        left: vec![rows, cols],
                        right: other.to_vec(),
                    })
                }
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.values(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let t = Tensor::new(vec![rows, cols], out).expect("concat output");
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, needs))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let dims = self.dims(a);
        let (r, c) = match dims {
            [r, c] => (*r, *c),
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: "transpose",
                    left: other.to_vec(),
                    right: vec![],
                })
            }
        };
        let av = self.values(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let needs = self.needs(a);
        let t = Tensor::new(vec![c, r], out).expect("transpose output");
        Ok(self.push(t, Op::Transpose { a }, needs))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.values(a).iter().sum();
        self.flops += self.values(a).len() as u64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, needs)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populate gradients of every `requires_grad` ancestor of `loss`.
    /// Gradients accumulate additively over fan-out; the loss's gradient
    /// with respect to itself is 1.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.tensor.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.tensor.dims().to_vec(),
            });
        }
        accumulate(&mut self.grads, loss, &[1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].clone() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = {
                        let d = self.nodes[a.0].tensor.dims();
                        (d[0], d[1])
                    };
                    let n = self.nodes[b.0].tensor.dims()[1];
                    if self.needs(a) {
                        let da = mm_nt(&g, self.values(b), m, n, k);
                        accumulate(&mut self.grads, a, &da);
                    }
                    if self.needs(b) {
                        let db = mm_tn(self.values(a), &g, m, k, n);
                        accumulate(&mut self.grads, b, &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(a) {
                        accumulate(&mut self.grads, a, &g);
                    }
                    if self.needs(b) {
                        let db = reduce_to(&g, self.nodes[b.0].tensor.numel());
                        accumulate(&mut self.grads, b, &db);
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(a) {
                        accumulate(&mut self.grads, a, &g);
                    }
                    if self.needs(b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        let db = reduce_to(&neg, self.nodes[b.0].tensor.numel());
                        accumulate(&mut self.grads, b, &db);
                    }
                }
                Op::Mul { a, b } => {
                    let bn = self.nodes[b.0].tensor.numel();
                    if self.needs(a) {
                        let bv = self.values(b);
                        let da: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * bv[i % bn])
                            .collect();
                        accumulate(&mut self.grads, a, &da);
                    }
                    if self.needs(b) {
                        let av = self.values(a);
                        let prod: Vec<f64> = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                        let db = reduce_to(&prod, bn);
                        accumulate(&mut self.grads, b, &db);
                    }
                }
                Op::Scale { a, factor } => {
                    if self.needs(a) {
                        let da: Vec<f64> = g.iter().map(|&gv| gv * factor).collect();
                        accumulate(&mut self.grads, a, &da);
                    }
                }
                Op::Gelu { a } => {
                    if self.needs(a) {
                        let av = self.values(a);
                        let da: Vec<f64> = g
                            .iter()
                            .zip(av)
                            .map(|(&gv, &x)| gv * gelu_grad_scalar(x))
                            .collect();
                        accumulate(&mut self.grads, a, &da);
                    }
                }
                Op::Softmax { a, axis } => {
                    if self.needs(a) {
                        let s = self.nodes[i].tensor.values();
                        let dims = self.nodes[i].tensor.dims();
                        let da = softmax_backward(s, &g, dims, axis);
                        accumulate(&mut self.grads, a, &da);
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (dx, dgamma, dbeta) = layer_norm_backward(
                        self.values(x),
                        self.values(gamma),
                        self.nodes[x.0].tensor.shape().last(),
                        eps,
                        &g,
                    );
                    if self.needs(x) {
                        accumulate(&mut self.grads, x, &dx);
                    }
                    if self.needs(gamma) {
                        accumulate(&mut self.grads, gamma, &dgamma);
                    }
                    if self.needs(beta) {
                        accumulate(&mut self.grads, beta, &dbeta);
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    if self.needs(logits) {
                        let lv = self.values(logits);
                        let classes = self.nodes[logits.0].tensor.shape().last();
                        let batch = labels.len() as f64;
                        let mut dl = vec![0.0; lv.len()];
                        for (bi, (row, &label)) in
                            lv.chunks_exact(classes).zip(labels.iter()).enumerate()
                        {
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                            let z: f64 = exps.iter().sum();
                            for c in 0..classes {
                                let p = exps[c] / z;
                                let onehot = if c == label { 1.0 } else { 0.0 };
                                dl[bi * classes + c] = g[0] * (p - onehot) / batch;
                            }
                        }
                        accumulate(&mut self.grads, logits, &dl);
                    }
                }
                Op::Gather { a, map } => {
                    if self.needs(a) {
                        let mut da = vec![0.0; self.nodes[a.0].tensor.numel()];
                        for (&src, &gv) in map.iter().zip(&g) {
                            da[src] += gv;
                        }
                        accumulate(&mut self.grads, a, &da);
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].tensor.numel();
                        if self.needs(p) {
                            accumulate(&mut self.grads, p, &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::Transpose { a } => {
                    if self.needs(a) {
                        let dims = self.nodes[i].tensor.dims();
                        let (r, c) = (dims[0], dims[1]);
                        let mut da = vec![0.0; r * c];
                        for gi in 0..r {
                            for gj in 0..c {
                                da[gj * r + gi] = g[gi * c + gj];
                            }
                        }
                        accumulate(&mut self.grads, a, &da);
                    }
                }
                Op::SumAll { a } => {
                    if self.needs(a) {
                        let da = vec![g[0]; self.nodes[a.0].tensor.numel()];
                        accumulate(&mut self.grads, a, &da);
                    }
                }
            }
        }
        Ok(())
    }

    /// Drop all accumulated gradients, keeping values.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }
}

enum Broadcast {
    Equal,
    Scalar,
    TrailingVec,
}

fn broadcast_mode(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::Equal);
    }
    let bn: usize = b.iter().product();
    if bn == 1 {
        return Some(Broadcast::Scalar);
    }
    if b.len() == 1 && b[0] == *a.last().expect("nonempty shape") {
        return Some(Broadcast::TrailingVec);
    }
    None
}

/// Sum `g` down to `target_len` elements: identity, full sum (scalar), or a
/// per-column sum over the trailing axis.
fn reduce_to(g: &[f64], target_len: usize) -> Vec<f64> {
    if g.len() == target_len {
        return g.to_vec();
    }
    if target_len == 1 {
        return vec![g.iter().sum()];
    }
    let mut out = vec![0.0; target_len];
    for (i, &v) in g.iter().enumerate() {
        out[i % target_len] += v;
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: TensorId, contribution: &[f64]) {
    let slot = &mut grads[id.0];
    match slot {
        Some(existing) => {
            for (e, &c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}

// ── Dense kernels ───────────────────────────────────────────────────────

/// `a[m×k] · b[k×n]`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a[m×n] · bᵀ` where `b` is `[k×n]`, yielding `[m×k]`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

/// `aᵀ · b` where `a` is `[m×k]` and `b` is `[m×n]`, yielding `[k×n]`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn softmax_values(x: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * axis_len * inner + a * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(x[at(a)]);
            }
            let mut z = 0.0;
            for a in 0..axis_len {
                let e = (x[at(a)] - max).exp();
                out[at(a)] = e;
                z += e;
            }
            for a in 0..axis_len {
                out[at(a)] /= z;
            }
        }
    }
    out
}

fn softmax_backward(s: &[f64], g: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut da = vec![0.0; s.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * axis_len * inner + a * inner + i;
            let mut dot = 0.0;
            for a in 0..axis_len {
                dot += g[at(a)] * s[at(a)];
            }
            for a in 0..axis_len {
                da[at(a)] = s[at(a)] * (g[at(a)] - dot);
            }
        }
    }
    da
}

fn layer_norm_backward(
    x: &[f64],
    gamma: &[f64],
    d: usize,
    eps: f64,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let df = d as f64;
    for ((row, grow), dxrow) in x
        .chunks_exact(d)
        .zip(g.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let mean = row.iter().sum::<f64>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
        let inv_std = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();

        let mut dxhat = vec![0.0; d];
        for j in 0..d {
            dgamma[j] += grow[j] * xhat[j];
            dbeta[j] += grow[j];
            dxhat[j] = grow[j] * gamma[j];
        }
        let sum_dxhat: f64 = dxhat.iter().sum();
        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
        for j in 0..d {
            dxrow[j] = inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorError;

    fn t(dims: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), values.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Triple-loop reference product, independent of the tape kernel's
    /// loop order.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_left() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.values(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul_oracle(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        let mut tape = Tape::new();
        let ai = tape.leaf(t(&[2, 2], &a));
        let bi = tape.leaf(t(&[2, 2], &b));
        let c = tape.matmul(ai, bi).unwrap();
        assert_eq!(tape.values(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_add_scalar_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let zero = tape.constant(Tensor::scalar(0.0));
        let s = tape.add(a, zero).unwrap();
        assert_eq!(tape.values(s), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn elementwise_mul_pointwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(a, b).unwrap();
        assert_eq!(tape.values(p), &[3.0, 8.0]);
    }

    #[test]
    fn elementwise_rejects_non_broadcastable() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4]));
        assert!(matches!(
            tape.add(a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn elementwise_broadcast_sums_grads_over_rows() {
        // d/db Σ (a + b) over 2 rows = [2, 2, 2]
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0; 6]));
        let b = tape.leaf(t(&[3], &[0.5, 0.5, 0.5]).with_grad());
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[0.0; 4]));
        let s = tape.softmax(x, 0).unwrap();
        assert!(close(tape.values(s), &[0.25; 4], 1e-15));
    }

    #[test]
    fn softmax_analytic_two_point() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 3.0_f64.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        assert!(close(tape.values(s), &[0.25, 0.75], 1e-15));
    }

    #[test]
    fn softmax_extreme_logits_no_overflow() {
        // Log-space oracle: p₀ = 1/(1+e⁻¹⁰⁰⁰), which is 1.0 in f64;
        // p₁ = e⁻¹⁰⁰⁰, far below the subnormal range.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1000.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.values(s);
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!(v[1] < 1e-300);
    }

    #[test]
    fn softmax_invalid_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.softmax(x, 2),
            Err(TensorError::InvalidAxis { axis: 2, .. })
        ));
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[5.0, 5.0, 5.0]));
        let g = tape.leaf(t(&[3], &[1.0; 3]));
        let b = tape.leaf(t(&[3], &[0.0; 3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.values(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_hand_computed() {
        // mean 2, population variance 2/3 → (x−2)/√(2/3)
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let g = tape.leaf(t(&[3], &[1.0; 3]));
        let b = tape.leaf(t(&[3], &[0.0; 3]));
        let y = tape.layer_norm(x, g, b, 1e-15).unwrap();
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!(close(tape.values(y), &[-expected, 0.0, expected], 1e-7));
        assert!((expected - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_affine_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let g = tape.leaf(t(&[3], &[0.0; 3]));
        let b = tape.leaf(t(&[3], &[7.0; 3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.values(y), &[7.0, 7.0, 7.0]);
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3]));
        let g = tape.leaf(Tensor::zeros(vec![3]));
        let b = tape.leaf(Tensor::zeros(vec![3]));
        assert!(matches!(
            tape.layer_norm(x, g, b, 0.0),
            Err(TensorError::NonPositiveEps { .. })
        ));
    }

    /// Gauss error function by Simpson quadrature of the density, an
    /// implementation-independent route to erf.
    fn erf_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let f = |u: f64| (-u * u).exp();
        let mut s = f(0.0) + f(x);
        for i in 1..n {
            let u = i as f64 * h;
            s += f(u) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        2.0 / std::f64::consts::PI.sqrt() * s * h / 3.0
    }

    #[test]
    fn gelu_zero_and_unit() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 1.0]));
        let y = tape.gelu(x);
        let v = tape.values(y);
        assert_eq!(v[0], 0.0);
        let oracle = 0.5 * (1.0 + erf_quadrature(1.0 * FRAC_1_SQRT_2));
        assert!((v[1] - oracle).abs() < 1e-9, "gelu(1)={} oracle={}", v[1], oracle);
        assert!((v[1] - 0.84134).abs() < 1e-5);
    }

    #[test]
    fn gelu_odd_erf_identity() {
        // gelu(x) − gelu(−x) = x, from oddness of erf
        let mut tape = Tape::new();
        for &x in &[0.1, 0.7, 1.9, 4.2] {
            let p = tape.leaf(Tensor::scalar(x));
            let m = tape.leaf(Tensor::scalar(-x));
            let gp = tape.gelu(p);
            let gm = tape.gelu(m);
            let diff = tape.values(gp)[0] - tape.values(gm)[0];
            assert!((diff - x).abs() < 1e-12, "x={x} diff={diff}");
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(&[1, 4], &[0.0; 4]));
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        assert!((tape.values(loss)[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logit() {
        // −log softmax([10,0,0,0])[0] = ln(1 + 3e⁻¹⁰)
        let mut tape = Tape::new();
        let logits = tape.leaf(t(&[1, 4], &[10.0, 0.0, 0.0, 0.0]));
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        let expected = (1.0 + 3.0 * (-10.0f64).exp()).ln();
        assert!((tape.values(loss)[0] - expected).abs() < 1e-15);
        assert!((expected - 1.362e-4).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 4]));
        assert!(matches!(
            tape.cross_entropy(logits, &[4]),
            Err(TensorError::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn backward_quadratic() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_fanout_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -1.0]).with_grad());
        let doubled = tape.add(x, x).unwrap();
        let loss = tape.sum_all(doubled);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_matmul_matches_central_differences() {
        let a = t(&[2, 3], &[0.3, -0.7, 0.2, 0.9, 0.1, -0.4]).with_grad();
        let b = t(&[3, 2], &[0.5, -0.2, 0.8, 0.3, -0.6, 0.1]).with_grad();
        let report = crate::tensor::grad_check_multi(
            |tape, ids| {
                let c = tape.matmul(ids[0], ids[1])?;
                Ok(tape.sum_all(c))
            },
            &[a, b],
            crate::tensor::GradCheckOptions::new(1e-5, 1e-6),
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gather_forward_and_scatter_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[10.0, 20.0, 30.0]).with_grad());
        // duplicate element 1 twice
        let g = tape
            .gather(x, Arc::new(vec![1, 1, 2]), vec![3])
            .unwrap();
        assert_eq!(tape.values(g), &[20.0, 20.0, 30.0]);
        let loss = tape.sum_all(g);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 2.0, 1.0]);
    }

    #[test]
    fn gather_rejects_out_of_bounds() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(
            tape.gather(x, Arc::new(vec![2]), vec![1]),
            Err(TensorError::GatherOutOfBounds { index: 2, len: 2 })
        ));
    }

    #[test]
    fn concat_rows_stacks_and_splits_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]).with_grad());
        let b = tape.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]).with_grad());
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.dims(c), &[3, 2]);
        assert_eq!(tape.values(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let scaled = tape.scale(c, 2.0);
        let loss = tape.sum_all(scaled);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let at = tape.transpose(a).unwrap();
        assert_eq!(tape.dims(at), &[3, 2]);
        let back = tape.transpose(at).unwrap();
        assert_eq!(tape.values(back), tape.values(a));
    }
}
