//! Incremental decoding with per-layer KV caches.
//!
//! Full layers keep every row; streaming layers keep the sink blocks plus a
//! ring of the most recent blocks, evicting whole blocks only when a new
//! block opens. A decode step runs the same row kernels as
//! [`Model::forward_inference_full`] over the same rows in the same order,
//! so its logits are bit-identical to a from-scratch forward of the whole
//! prefix.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{attend_one_head, scale_for, KvSeg};
use crate::mask::SparsePattern;
use crate::model::{
    add_assign, affine_rows, embed_rows, kv_rows, matmul_rows, relu_rows, rmsnorm_rows, LayerMode,
    Model,
};
use crate::tensor::{NumericsError, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum RuntimeError {
    /// Decoding needs committed layer modes; blend gates are a training
    /// artifact.
    BlendedLayer { layer: usize },
    EmptyPrompt,
    ContextOverflow { len: usize, max: usize },
    Model(NumericsError),
}

impl core::fmt::Display for RuntimeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RuntimeError::BlendedLayer { layer } => {
                write!(f, "layer {layer} is still blended; commit modes before decoding")
            }
            RuntimeError::EmptyPrompt => write!(f, "prefill needs at least one token"),
            RuntimeError::ContextOverflow { len, max } => {
                write!(f, "position {len} exceeds max_seq_len {max}")
            }
            RuntimeError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for RuntimeError {}

impl From<NumericsError> for RuntimeError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::ContextOverflow { len, max } => {
                RuntimeError::ContextOverflow { len, max }
            }
            other => RuntimeError::Model(other),
        }
    }
}

/// Unbounded cache: every row is retained.
pub struct FullKvCache {
    width: usize,
    k: Vec<f64>,
    v: Vec<f64>,
    rows: usize,
}

impl FullKvCache {
    pub fn new(width: usize) -> Self {
        FullKvCache {
            width,
            k: Vec::new(),
            v: Vec::new(),
            rows: 0,
        }
    }

    pub fn push_row(&mut self, k_row: &[f64], v_row: &[f64]) {
        debug_assert_eq!(k_row.len(), self.width);
        debug_assert_eq!(v_row.len(), self.width);
        self.k.extend_from_slice(k_row);
        self.v.extend_from_slice(v_row);
        self.rows += 1;
    }

    pub fn retained_rows(&self) -> usize {
        self.rows
    }

    pub fn segments(&self, offset: usize) -> Vec<KvSeg<'_>> {
        vec![KvSeg {
            keys: &self.k,
            vals: &self.v,
            rows: self.rows,
            stride: self.width,
            offset,
        }]
    }
}

struct RingBlock {
    /// Block index in the absolute position space.
    index: usize,
    k: Vec<f64>,
    v: Vec<f64>,
    rows: usize,
}

/// Bounded cache for the streaming pattern. Holds each retained row exactly
/// once: blocks before `sink_blocks` in the sink store, later blocks in a
/// ring ordered oldest→newest. Retained rows never exceed
/// `(sink_blocks + local_blocks) · block`.
pub struct SsaKvCache {
    pattern: SparsePattern,
    width: usize,
    sink_k: Vec<f64>,
    sink_v: Vec<f64>,
    sink_rows: usize,
    ring: VecDeque<RingBlock>,
    next_pos: usize,
    evictions: u64,
}

impl SsaKvCache {
    pub fn new(pattern: SparsePattern, width: usize) -> Self {
        let sink_cap = pattern.sink_blocks * pattern.block;
        SsaKvCache {
            pattern,
            width,
            sink_k: Vec::with_capacity(sink_cap * width),
            sink_v: Vec::with_capacity(sink_cap * width),
            sink_rows: 0,
            ring: VecDeque::with_capacity(pattern.local_blocks),
            next_pos: 0,
            evictions: 0,
        }
    }

    /// Appends the row for the next absolute position. Whole expired blocks
    /// are dropped exactly when a new block opens.
    pub fn push_row(&mut self, k_row: &[f64], v_row: &[f64]) {
        debug_assert_eq!(k_row.len(), self.width);
        let t = self.next_pos;
        self.next_pos += 1;
        let b = self.pattern.block;
        let bi = t / b;
        if bi < self.pattern.sink_blocks {
            self.sink_k.extend_from_slice(k_row);
            self.sink_v.extend_from_slice(v_row);
            self.sink_rows += 1;
            return;
        }
        let opens_block = t % b == 0 || self.ring.back().is_none_or(|blk| blk.index != bi);
        if opens_block {
            // A key block expires once it is `local_blocks` behind the
            // query block.
            while self
                .ring
                .front()
                .is_some_and(|blk| bi - blk.index >= self.pattern.local_blocks)
            {
                self.ring.pop_front();
                self.evictions += 1;
            }
            self.ring.push_back(RingBlock {
                index: bi,
                k: Vec::with_capacity(b * self.width),
                v: Vec::with_capacity(b * self.width),
                rows: 0,
            });
        }
        let blk = self.ring.back_mut().expect("block just ensured");
        blk.k.extend_from_slice(k_row);
        blk.v.extend_from_slice(v_row);
        blk.rows += 1;
    }

    pub fn retained_rows(&self) -> usize {
        self.sink_rows + self.ring.iter().map(|b| b.rows).sum::<usize>()
    }

    /// Hard bound on retained rows, independent of how much was pushed.
    pub fn capacity_rows(&self) -> usize {
        self.pattern.window()
    }

    pub fn evicted_blocks(&self) -> u64 {
        self.evictions
    }

    /// Retained rows in ascending absolute position: sink first, then ring
    /// blocks oldest to newest.
    pub fn segments(&self, offset: usize) -> Vec<KvSeg<'_>> {
        let mut out = Vec::with_capacity(1 + self.ring.len());
        if self.sink_rows > 0 {
            out.push(KvSeg {
                keys: &self.sink_k,
                vals: &self.sink_v,
                rows: self.sink_rows,
                stride: self.width,
                offset,
            });
        }
        for blk in &self.ring {
            out.push(KvSeg {
                keys: &blk.k,
                vals: &blk.v,
                rows: blk.rows,
                stride: self.width,
                offset,
            });
        }
        out
    }
}

pub enum LayerCache {
    Full(FullKvCache),
    Sparse(SsaKvCache),
}

impl LayerCache {
    fn push_row(&mut self, k_row: &[f64], v_row: &[f64]) {
        match self {
            LayerCache::Full(c) => c.push_row(k_row, v_row),
            LayerCache::Sparse(c) => c.push_row(k_row, v_row),
        }
    }

    pub fn retained_rows(&self) -> usize {
        match self {
            LayerCache::Full(c) => c.retained_rows(),
            LayerCache::Sparse(c) => c.retained_rows(),
        }
    }

    fn segments(&self, offset: usize) -> Vec<KvSeg<'_>> {
        match self {
            LayerCache::Full(c) => c.segments(offset),
            LayerCache::Sparse(c) => c.segments(offset),
        }
    }
}

/// Rows-read accounting. KV rows are shared across heads (one cache per
/// layer), so a row counts once per layer per step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub steps: u64,
    pub kv_rows_read: u64,
    /// Rows read by each layer during the most recent step.
    pub last_step_rows: Vec<u64>,
}

pub struct Decoder<'m> {
    model: &'m Model,
    caches: Vec<LayerCache>,
    pos: usize,
    pub stats: DecodeStats,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model) -> Result<Self, RuntimeError> {
        let width = model.config.attn_width();
        let mut caches = Vec::with_capacity(model.config.n_layers);
        for (i, mode) in model.modes.iter().enumerate() {
            caches.push(match mode {
                LayerMode::Full => LayerCache::Full(FullKvCache::new(width)),
                LayerMode::Sparse { pattern } => {
                    LayerCache::Sparse(SsaKvCache::new(*pattern, width))
                }
                LayerMode::Blended { .. } => return Err(RuntimeError::BlendedLayer { layer: i }),
            });
        }
        Ok(Decoder {
            model,
            caches,
            pos: 0,
            stats: DecodeStats {
                steps: 0,
                kv_rows_read: 0,
                last_step_rows: vec![0; model.config.n_layers],
            },
        })
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn cache(&self, layer: usize) -> &LayerCache {
        &self.caches[layer]
    }

    /// Runs the whole prompt through the inference forward, installs every
    /// row into the caches through the same push path decoding uses, and
    /// returns the prompt logits.
    pub fn prefill(&mut self, tokens: &[usize]) -> Result<Tensor, RuntimeError> {
        if tokens.is_empty() {
            return Err(RuntimeError::EmptyPrompt);
        }
        assert_eq!(self.pos, 0, "prefill must come before any decode step");
        let (logits, kvs) = self.model.forward_inference_full(tokens)?;
        let w = self.model.config.attn_width();
        for (cache, kv) in self.caches.iter_mut().zip(&kvs) {
            for i in 0..tokens.len() {
                cache.push_row(
                    &kv.k.data()[i * w..(i + 1) * w],
                    &kv.v.data()[i * w..(i + 1) * w],
                );
            }
        }
        self.pos = tokens.len();
        Ok(logits)
    }

    /// Appends one token and returns its next-token logits row.
    pub fn decode_step(&mut self, token: usize) -> Result<Vec<f64>, RuntimeError> {
        let cfg = &self.model.config;
        if self.pos >= cfg.max_seq_len {
            return Err(RuntimeError::ContextOverflow {
                len: self.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        let d = cfg.d_model;
        let w = cfg.attn_width();
        let hd = cfg.head_dim;
        let scale = scale_for(hd);
        let mut x = embed_rows(&self.model.embed, &[token])?;
        add_assign(
            &mut x,
            &self.model.pos_embed.data()[self.pos * d..(self.pos + 1) * d],
        );
        let mut scratch = Vec::new();
        self.stats.steps += 1;
        for (li, layer) in self.model.layers.iter().enumerate() {
            let h = rmsnorm_rows(&x, layer.norm1.data());
            let q = matmul_rows(&h, 1, d, layer.w_q.data(), w);
            let (k_row, v_row) = kv_rows(&h, 1, d, &layer.kv, w);
            self.caches[li].push_row(&k_row, &v_row);

            let rows = self.caches[li].retained_rows() as u64;
            self.stats.kv_rows_read += rows;
            self.stats.last_step_rows[li] = rows;

            let mut attn = vec![0.0; w];
            for hi in 0..cfg.n_heads {
                let offset = hi * hd;
                let segments = self.caches[li].segments(offset);
                attend_one_head(
                    &q[offset..offset + hd],
                    &segments,
                    scale,
                    &mut attn[offset..offset + hd],
                    &mut scratch,
                );
            }
            let o = matmul_rows(&attn, 1, w, layer.w_o.data(), d);
            add_assign(&mut x, &o);
            let h2 = rmsnorm_rows(&x, layer.norm2.data());
            let f1 = affine_rows(
                &h2,
                1,
                d,
                layer.ffn_w1.data(),
                cfg.ffn_dim,
                layer.ffn_b1.data(),
            );
            let f1 = relu_rows(f1);
            let f2 = affine_rows(
                &f1,
                1,
                cfg.ffn_dim,
                layer.ffn_w2.data(),
                d,
                layer.ffn_b2.data(),
            );
            add_assign(&mut x, &f2);
        }
        self.pos += 1;
        let xn = rmsnorm_rows(&x, self.model.final_norm.data());
        Ok(affine_rows(
            &xn,
            1,
            d,
            self.model.head_w.data(),
            cfg.vocab_size,
            self.model.head_b.data(),
        ))
    }
}
