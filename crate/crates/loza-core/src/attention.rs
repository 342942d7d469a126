//! Attention kernels.
//!
//! Two evaluation paths compute the same math:
//!
//! * graph ops ([`attend_graph`]) — differentiable, used for training and
//!   calibration; masking skips entries rather than writing -inf;
//! * gathered row kernels ([`attend_one_head`], [`attend_rows`]) — forward
//!   only, walk explicit key ranges, used by inference and the decode
//!   runtime. Incremental decode and from-scratch evaluation share this one
//!   kernel, so their outputs are bit-identical whenever the visited rows
//!   and their order coincide.

use alloc::rc::Rc;
use alloc::vec::Vec;
use core::ops::Range;

use crate::fmath;
use crate::graph::{Graph, NodeId};
use crate::mask::{AttnMask, SparsePattern};
use crate::tensor::{NumericsError, Tensor};

/// Score scale `1/√head_dim`.
pub fn scale_for(head_dim: usize) -> f64 {
    1.0 / fmath::sqrt(head_dim as f64)
}

/// Scaled-dot-product attention for one head on the tape:
/// `softmax(q·kᵀ/√d, mask) · v`.
pub fn attend_graph(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Rc<AttnMask>,
) -> Result<NodeId, NumericsError> {
    let head_dim = g.value(q).cols();
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, scale_for(head_dim));
    let weights = g.softmax_rows(scaled, Some(mask))?;
    g.matmul(weights, v)
}

/// Causal attention for one head over `[n, d]` q/k/v nodes.
pub fn full_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId, NumericsError> {
    let n = g.value(q).rows();
    attend_graph(g, q, k, v, Rc::new(AttnMask::causal(n)))
}

/// Causal attention restricted to the streaming pattern.
pub fn streaming_sparse_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    pattern: &SparsePattern,
) -> Result<NodeId, NumericsError> {
    let n = g.value(q).rows();
    attend_graph(g, q, k, v, Rc::new(AttnMask::streaming(n, pattern)))
}

/// `α·full + (1−α)·sparse` over the same q/k/v; `alpha` must be a scalar
/// node in `[0, 1]` and receives the blend gradient.
pub fn blended_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    pattern: &SparsePattern,
    alpha: NodeId,
) -> Result<NodeId, NumericsError> {
    let of = full_attention(g, q, k, v)?;
    let os = streaming_sparse_attention(g, q, k, v, pattern)?;
    g.blend(of, os, alpha)
}

/// Low-rank projection of hidden states into stacked-head q/k/v matrices.
/// k and v are reconstructed from a shared latent `c = h·w_down`, so the
/// stacked key (and value) matrix has rank at most the latent width.
pub fn mla_lite_project(
    g: &mut Graph,
    h: NodeId,
    w_q: NodeId,
    w_down: NodeId,
    w_uk: NodeId,
    w_uv: NodeId,
) -> Result<(NodeId, NodeId, NodeId), NumericsError> {
    let q = g.matmul(h, w_q)?;
    let c = g.matmul(h, w_down)?;
    let k = g.matmul(c, w_uk)?;
    let v = g.matmul(c, w_uv)?;
    Ok((q, k, v))
}

/// A contiguous run of cached rows. `keys`/`vals` hold `rows` rows of
/// `stride` columns; one head's slice starts at `offset` in every row.
#[derive(Clone, Copy)]
pub struct KvSeg<'a> {
    pub keys: &'a [f64],
    pub vals: &'a [f64],
    pub rows: usize,
    pub stride: usize,
    pub offset: usize,
}

/// One query, one head, over ordered segments of cached rows.
///
/// The arithmetic sequence is fixed: dot products in row order, max, then
/// exp/denominator in row order, then the weighted value sum in row order.
/// Segment boundaries do not affect the result — only the visited rows and
/// their order do.
pub fn attend_one_head(
    q: &[f64],
    segments: &[KvSeg<'_>],
    scale: f64,
    out: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let head_dim = q.len();
    let total: usize = segments.iter().map(|s| s.rows).sum();
    assert!(total > 0, "attention over zero rows is degenerate");

    scratch.clear();
    scratch.reserve(total);
    let mut max = f64::NEG_INFINITY;
    for seg in segments {
        for r in 0..seg.rows {
            let krow = &seg.keys[r * seg.stride + seg.offset..][..head_dim];
            let mut acc = 0.0;
            for t in 0..head_dim {
                acc += q[t] * krow[t];
            }
            let s = acc * scale;
            if s > max {
                max = s;
            }
            scratch.push(s);
        }
    }

    let mut denom = 0.0;
    for s in scratch.iter_mut() {
        *s = fmath::exp(*s - max);
        denom += *s;
    }

    out.fill(0.0);
    let mut idx = 0;
    for seg in segments {
        for r in 0..seg.rows {
            let w = scratch[idx] / denom;
            idx += 1;
            let vrow = &seg.vals[r * seg.stride + seg.offset..][..head_dim];
            for t in 0..head_dim {
                out[t] += w * vrow[t];
            }
        }
    }
}

/// Multi-head attention over whole matrices, forward only. `q`, `k`, `v`
/// are `[n, heads·head_dim]`; `ranges_for(i)` yields the allowed key row
/// ranges for query `i` in ascending order.
pub fn attend_rows<F>(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mut ranges_for: F) -> Tensor
where
    F: FnMut(usize) -> Vec<Range<usize>>,
{
    let n = q.rows();
    let width = q.cols();
    debug_assert_eq!(width % heads, 0);
    let head_dim = width / heads;
    let scale = scale_for(head_dim);
    let mut out = Tensor::zeros(alloc::vec![n, width]);
    let mut scratch = Vec::new();
    for i in 0..n {
        let ranges = ranges_for(i);
        for h in 0..heads {
            let offset = h * head_dim;
            let segments: Vec<KvSeg<'_>> = ranges
                .iter()
                .map(|r| KvSeg {
                    keys: &k.data()[r.start * width..r.end * width],
                    vals: &v.data()[r.start * width..r.end * width],
                    rows: r.len(),
                    stride: width,
                    offset,
                })
                .collect();
            let qrow = &q.data()[i * width + offset..][..head_dim];
            let orow = &mut out.data_mut()[i * width + offset..][..head_dim];
            attend_one_head(qrow, &segments, scale, orow, &mut scratch);
        }
    }
    out
}
