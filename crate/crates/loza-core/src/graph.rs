//! Eager tape autodiff.
//!
//! A [`Graph`] is an append-only arena of nodes; recording an op computes its
//! value immediately and remembers how to push gradients back. Node inputs
//! always precede the node itself, so `backward` is a single reverse sweep.
//!
//! Gradient buffers are allocated lazily and only for nodes on a path from a
//! tensor with `requires_grad` to the loss; frozen leaves never get one.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::mask::AttnMask;
use crate::tensor::{NumericsError, Tensor};

/// Target sentinel: rows labelled with this are excluded from the loss mean.
pub const IGNORE_TARGET: usize = usize::MAX;

const RMSNORM_EPS: f64 = 1e-8;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    MatmulNt(NodeId, NodeId),
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<NodeId>),
    Sigmoid(NodeId),
    RmsNorm {
        x: NodeId,
        gain: NodeId,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    SoftmaxRows {
        logits: NodeId,
        mask: Option<Rc<AttnMask>>,
    },
    /// alpha * full + (1 - alpha) * sparse, exact at the endpoints.
    Blend {
        full: NodeId,
        sparse: NodeId,
        alpha: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    Sum(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only autodiff tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw matmul kernels, shared by forward and backward ──

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let a_it = a[i * k + t];
            if a_it == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += a_it * brow[j];
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ (rows of A dotted with rows of B)
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// C[m,n] = A[k,m]ᵀ · B[k,n]
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let a_ti = arow[i];
            if a_ti == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += a_ti * brow[j];
            }
        }
    }
    c
}

fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a node after `backward`, if it was on a grad path.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.needs_grad()
    }

    /// Records an input tensor (parameter or constant) as-is.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    fn shape2(&self, id: NodeId) -> (usize, usize) {
        let s = self.value(id).shape();
        debug_assert_eq!(s.len(), 2);
        (s[0], s[1])
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?
            .requires_grad(self.needs(a) || self.needs(b));
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?
            .requires_grad(self.needs(a) || self.needs(b));
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), data)
            .expect("shape preserved")
            .requires_grad(self.needs(x));
        self.push(Op::Relu(x), value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| c * v).collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), data)
            .expect("shape preserved")
            .requires_grad(self.needs(x));
        self.push(Op::Scale(x, c), value)
    }

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value =
            Tensor::from_vec(vec![m, n], data)?.requires_grad(self.needs(a) || self.needs(b));
        Ok(self.push(Op::Matmul(a, b), value))
    }

    /// `[m,k] · [n,k]ᵀ -> [m,n]`; avoids materialising a transpose for
    /// attention scores.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, k) = self.shape2(a);
        let (n, k2) = self.shape2(b);
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let value =
            Tensor::from_vec(vec![m, n], data)?.requires_grad(self.needs(a) || self.needs(b));
        Ok(self.push(Op::MatmulNt(a, b), value))
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (n, k) = self.shape2(x);
        let (k2, m) = self.shape2(w);
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "affine",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(w).shape().to_vec(),
            });
        }
        if self.value(b).shape() != [m] {
            return Err(NumericsError::ShapeMismatch {
                op: "affine bias",
                lhs: self.value(b).shape().to_vec(),
                rhs: vec![m],
            });
        }
        let mut data = mm(self.value(x).data(), self.value(w).data(), n, k, m);
        let bias = self.value(b).data();
        for row in data.chunks_exact_mut(m) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let value = Tensor::from_vec(vec![n, m], data)?
            .requires_grad(self.needs(x) || self.needs(w) || self.needs(b));
        Ok(self.push(Op::Affine { x, w, b }, value))
    }

    /// Columns `start..end` of a 2-D node.
    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, NumericsError> {
        let (n, k) = self.shape2(x);
        if start > end || end > k {
            return Err(NumericsError::IndexOutOfRange {
                what: "slice_cols end",
                index: end,
                limit: k,
            });
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&src[i * k + start..i * k + end]);
        }
        let value = Tensor::from_vec(vec![n, w], data)?.requires_grad(self.needs(x));
        Ok(self.push(Op::SliceCols { x, start, end }, value))
    }

    /// Horizontal concatenation of 2-D nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let (n, _) = self.shape2(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (rows, cols) = self.shape2(p);
            if rows != n {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total += cols;
        }
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                let (_, cols) = self.shape2(p);
                let src = self.value(p).data();
                data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::from_vec(vec![n, total], data)?.requires_grad(needs);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                // Split on sign so exp never overflows.
                if v >= 0.0 {
                    1.0 / (1.0 + fmath::exp(-v))
                } else {
                    let e = fmath::exp(v);
                    e / (1.0 + e)
                }
            })
            .collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), data)
            .expect("shape preserved")
            .requires_grad(self.needs(x));
        self.push(Op::Sigmoid(x), value)
    }

    /// Row-wise RMS normalisation with a learned per-column gain.
    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId, NumericsError> {
        let (n, d) = self.shape2(x);
        if self.value(gain).shape() != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "rmsnorm gain",
                lhs: self.value(gain).shape().to_vec(),
                rhs: vec![d],
            });
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = fmath::sqrt(ms + RMSNORM_EPS);
            for j in 0..d {
                data[i * d + j] = g[j] * row[j] / r;
            }
        }
        let value =
            Tensor::from_vec(vec![n, d], data)?.requires_grad(self.needs(x) || self.needs(gain));
        Ok(self.push(Op::RmsNorm { x, gain }, value))
    }

    /// Gathers rows of `table` by token id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let (vocab, d) = self.shape2(table);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(NumericsError::IndexOutOfRange {
                    what: "token id",
                    index: id,
                    limit: vocab,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(vec![ids.len(), d], data)?.requires_grad(self.needs(table));
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    /// Row softmax. With a mask, disallowed entries are skipped entirely (not
    /// set to -inf), so the summation order matches a gathered evaluation of
    /// the same rows. Errors if any row has no allowed entry.
    pub fn softmax_rows(
        &mut self,
        logits: NodeId,
        mask: Option<Rc<AttnMask>>,
    ) -> Result<NodeId, NumericsError> {
        let (n, k) = self.shape2(logits);
        if let Some(m) = &mask {
            assert_eq!(
                (m.n(), m.n()),
                (n, k),
                "mask extent must match the score matrix"
            );
        }
        let src = self.value(logits).data();
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let row = &src[i * k..(i + 1) * k];
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for j in 0..k {
                if mask.as_ref().is_none_or(|m| m.allowed(i, j)) {
                    any = true;
                    if row[j] > max {
                        max = row[j];
                    }
                }
            }
            if !any {
                return Err(NumericsError::DegenerateRow { row: i });
            }
            let mut denom = 0.0;
            for j in 0..k {
                if mask.as_ref().is_none_or(|m| m.allowed(i, j)) {
                    let e = fmath::exp(row[j] - max);
                    data[i * k + j] = e;
                    denom += e;
                }
            }
            for j in 0..k {
                data[i * k + j] /= denom;
            }
        }
        let value = Tensor::from_vec(vec![n, k], data)?.requires_grad(self.needs(logits));
        Ok(self.push(Op::SoftmaxRows { logits, mask }, value))
    }

    /// `alpha·full + (1−alpha)·sparse` where `alpha` is a 1-element node.
    /// At alpha exactly 0 or 1 the result is a bit-for-bit copy of the
    /// surviving branch, so a saturated gate cannot perturb the output.
    pub fn blend(
        &mut self,
        full: NodeId,
        sparse: NodeId,
        alpha: NodeId,
    ) -> Result<NodeId, NumericsError> {
        self.same_shape("blend", full, sparse)?;
        assert!(
            self.value(alpha).is_scalar(),
            "blend gate must be a 1-element node"
        );
        let a = self.value(alpha).item();
        if !(0.0..=1.0).contains(&a) {
            return Err(NumericsError::GateOutOfRange { alpha: a });
        }
        let f = self.value(full).data();
        let s = self.value(sparse).data();
        let data: Vec<f64> = if a == 1.0 {
            f.to_vec()
        } else if a == 0.0 {
            s.to_vec()
        } else {
            f.iter().zip(s).map(|(x, y)| a * x + (1.0 - a) * y).collect()
        };
        let needs = self.needs(full) || self.needs(sparse) || self.needs(alpha);
        let value = Tensor::from_vec(self.value(full).shape().to_vec(), data)?.requires_grad(needs);
        Ok(self.push(Op::Blend { full, sparse, alpha }, value))
    }

    /// Mean negative log-likelihood over rows; rows labelled [`IGNORE_TARGET`]
    /// are excluded from the mean.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, NumericsError> {
        let (n, v) = self.shape2(logits);
        if targets.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy targets",
                lhs: vec![targets.len()],
                rhs: vec![n],
            });
        }
        let src = self.value(logits).data();
        let mut total = 0.0;
        let mut counted = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE_TARGET {
                continue;
            }
            if t >= v {
                return Err(NumericsError::IndexOutOfRange {
                    what: "target id",
                    index: t,
                    limit: v,
                });
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + fmath::ln(row.iter().map(|&x| fmath::exp(x - max)).sum::<f64>());
            total += lse - row[t];
            counted += 1;
        }
        assert!(counted > 0, "cross_entropy needs at least one scored row");
        let value =
            Tensor::scalar(total / counted as f64).requires_grad(self.needs(logits));
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            value,
        ))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value =
            Tensor::scalar(self.value(x).data().iter().sum()).requires_grad(self.needs(x));
        self.push(Op::Sum(x), value)
    }

    /// Reverse sweep from a scalar loss. Each node's gradient is complete
    /// before it is visited because inputs always precede their consumers.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(NumericsError::LossNotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.nodes[loss.0].value.ensure_grad()[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            let gout = match self.nodes[idx].value.take_grad() {
                Some(g) => g,
                None => continue,
            };
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            backprop(node, &gout, before);
            self.nodes[idx].value.set_grad(gout);
        }
        Ok(())
    }
}

/// Accumulates `gout` into the gradients of `node`'s inputs (all of which
/// live in `before`, at indices smaller than the node's own).
fn backprop(node: &Node, gout: &[f64], before: &mut [Node]) {
    // Inputs that are frozen (no grad requirement) are skipped so they never
    // allocate a gradient buffer.
    macro_rules! grad_into {
        ($id:expr, $body:expr) => {
            if before[$id.0].value.needs_grad() {
                let f: &mut dyn FnMut(&mut [f64]) = &mut $body;
                f(before[$id.0].value.ensure_grad());
            }
        };
    }

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            grad_into!(a, |g: &mut [f64]| axpy(g, 1.0, gout));
            grad_into!(b, |g: &mut [f64]| axpy(g, 1.0, gout));
        }
        Op::Mul(a, b) => {
            let (ai, bi) = (a.0, b.0);
            if before[ai].value.needs_grad() {
                let bdata = before[bi].value.data().to_vec();
                let g = before[ai].value.ensure_grad();
                for ((gi, go), bv) in g.iter_mut().zip(gout).zip(&bdata) {
                    *gi += go * bv;
                }
            }
            if before[bi].value.needs_grad() {
                let adata = before[ai].value.data().to_vec();
                let g = before[bi].value.ensure_grad();
                for ((gi, go), av) in g.iter_mut().zip(gout).zip(&adata) {
                    *gi += go * av;
                }
            }
        }
        Op::Relu(x) => {
            if before[x.0].value.needs_grad() {
                let xdata = before[x.0].value.data().to_vec();
                let g = before[x.0].value.ensure_grad();
                for ((gi, go), xv) in g.iter_mut().zip(gout).zip(&xdata) {
                    if *xv > 0.0 {
                        *gi += go;
                    }
                }
            }
        }
        Op::Scale(x, c) => {
            let c = *c;
            grad_into!(x, |g: &mut [f64]| axpy(g, c, gout));
        }
        Op::Matmul(a, b) => {
            let (m, k) = {
                let s = before[a.0].value.shape();
                (s[0], s[1])
            };
            let n = before[b.0].value.shape()[1];
            if before[a.0].value.needs_grad() {
                let ga = mm_nt(gout, before[b.0].value.data(), m, n, k);
                axpy(before[a.0].value.ensure_grad(), 1.0, &ga);
            }
            if before[b.0].value.needs_grad() {
                let gb = mm_tn(before[a.0].value.data(), gout, k, m, n);
                axpy(before[b.0].value.ensure_grad(), 1.0, &gb);
            }
        }
        Op::MatmulNt(a, b) => {
            let (m, k) = {
                let s = before[a.0].value.shape();
                (s[0], s[1])
            };
            let n = before[b.0].value.shape()[0];
            if before[a.0].value.needs_grad() {
                let ga = mm(gout, before[b.0].value.data(), m, n, k);
                axpy(before[a.0].value.ensure_grad(), 1.0, &ga);
            }
            if before[b.0].value.needs_grad() {
                let gb = mm_tn(gout, before[a.0].value.data(), n, m, k);
                axpy(before[b.0].value.ensure_grad(), 1.0, &gb);
            }
        }
        Op::Affine { x, w, b } => {
            let (n, k) = {
                let s = before[x.0].value.shape();
                (s[0], s[1])
            };
            let m = before[w.0].value.shape()[1];
            if before[x.0].value.needs_grad() {
                let gx = mm_nt(gout, before[w.0].value.data(), n, m, k);
                axpy(before[x.0].value.ensure_grad(), 1.0, &gx);
            }
            if before[w.0].value.needs_grad() {
                let gw = mm_tn(before[x.0].value.data(), gout, k, n, m);
                axpy(before[w.0].value.ensure_grad(), 1.0, &gw);
            }
            if before[b.0].value.needs_grad() {
                let g = before[b.0].value.ensure_grad();
                for row in gout.chunks_exact(m) {
                    for (gi, go) in g.iter_mut().zip(row) {
                        *gi += go;
                    }
                }
            }
        }
        Op::SliceCols { x, start, end } => {
            if before[x.0].value.needs_grad() {
                let k = before[x.0].value.shape()[1];
                let w = end - start;
                let g = before[x.0].value.ensure_grad();
                for (i, row) in gout.chunks_exact(w).enumerate() {
                    for (j, go) in row.iter().enumerate() {
                        g[i * k + start + j] += go;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let n = node.value.shape()[0];
            let total = node.value.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let cols = before[p.0].value.shape()[1];
                if before[p.0].value.needs_grad() {
                    let g = before[p.0].value.ensure_grad();
                    for i in 0..n {
                        let src = &gout[i * total + offset..i * total + offset + cols];
                        for (gi, go) in g[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                            *gi += go;
                        }
                    }
                }
                offset += cols;
            }
        }
        Op::Sigmoid(x) => {
            if before[x.0].value.needs_grad() {
                let y = node.value.data();
                let g = before[x.0].value.ensure_grad();
                for ((gi, go), yv) in g.iter_mut().zip(gout).zip(y) {
                    *gi += go * yv * (1.0 - yv);
                }
            }
        }
        Op::RmsNorm { x, gain } => {
            let (n, d) = {
                let s = before[x.0].value.shape();
                (s[0], s[1])
            };
            let xdata = before[x.0].value.data().to_vec();
            let gdata = before[gain.0].value.data().to_vec();
            if before[x.0].value.needs_grad() {
                let gx = before[x.0].value.ensure_grad();
                for i in 0..n {
                    let row = &xdata[i * d..(i + 1) * d];
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let r = fmath::sqrt(ms + RMSNORM_EPS);
                    let go = &gout[i * d..(i + 1) * d];
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += go[j] * gdata[j] * row[j];
                    }
                    for j in 0..d {
                        gx[i * d + j] +=
                            go[j] * gdata[j] / r - row[j] * dot / (d as f64 * r * r * r);
                    }
                }
            }
            if before[gain.0].value.needs_grad() {
                let gg = before[gain.0].value.ensure_grad();
                for i in 0..n {
                    let row = &xdata[i * d..(i + 1) * d];
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let r = fmath::sqrt(ms + RMSNORM_EPS);
                    let go = &gout[i * d..(i + 1) * d];
                    for j in 0..d {
                        gg[j] += go[j] * row[j] / r;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if before[table.0].value.needs_grad() {
                let d = before[table.0].value.shape()[1];
                let g = before[table.0].value.ensure_grad();
                for (i, &id) in ids.iter().enumerate() {
                    let src = &gout[i * d..(i + 1) * d];
                    for (gi, go) in g[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *gi += go;
                    }
                }
            }
        }
        Op::SoftmaxRows { logits, mask } => {
            if before[logits.0].value.needs_grad() {
                let (n, k) = (node.value.shape()[0], node.value.shape()[1]);
                let w = node.value.data();
                let g = before[logits.0].value.ensure_grad();
                for i in 0..n {
                    let wrow = &w[i * k..(i + 1) * k];
                    let grow = &gout[i * k..(i + 1) * k];
                    let mut dot = 0.0;
                    for j in 0..k {
                        dot += wrow[j] * grow[j];
                    }
                    for j in 0..k {
                        if mask.as_ref().is_none_or(|m| m.allowed(i, j)) {
                            g[i * k + j] += wrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
        }
        Op::Blend { full, sparse, alpha } => {
            let a = before[alpha.0].value.item();
            grad_into!(full, |g: &mut [f64]| axpy(g, a, gout));
            grad_into!(sparse, |g: &mut [f64]| axpy(g, 1.0 - a, gout));
            if before[alpha.0].value.needs_grad() {
                let f = before[full.0].value.data();
                let s = before[sparse.0].value.data();
                let mut acc = 0.0;
                for i in 0..gout.len() {
                    acc += gout[i] * (f[i] - s[i]);
                }
                before[alpha.0].value.ensure_grad()[0] += acc;
            }
        }
        Op::CrossEntropy { logits, targets } => {
            if before[logits.0].value.needs_grad() {
                let v = before[logits.0].value.shape()[1];
                let src = before[logits.0].value.data().to_vec();
                let counted = targets.iter().filter(|&&t| t != IGNORE_TARGET).count();
                let scale = gout[0] / counted as f64;
                let g = before[logits.0].value.ensure_grad();
                for (i, &t) in targets.iter().enumerate() {
                    if t == IGNORE_TARGET {
                        continue;
                    }
                    let row = &src[i * v..(i + 1) * v];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&x| fmath::exp(x - max)).sum();
                    for j in 0..v {
                        let p = fmath::exp(row[j] - max) / denom;
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        g[i * v + j] += scale * (p - indicator);
                    }
                }
            }
        }
        Op::Sum(x) => {
            grad_into!(x, |g: &mut [f64]| {
                for gi in g.iter_mut() {
                    *gi += gout[0];
                }
            });
        }
    }
}
