//! Attention visibility: full causal masks and the streaming block pattern.
//!
//! The streaming rule, with block size `b`, `s` sink blocks and `l` local
//! blocks, allows query `i` to see key `j` iff
//!
//! ```text
//! j <= i  &&  ( j/b < s  ||  i/b - j/b < l )
//! ```
//!
//! so every query sees the first `s` blocks plus the trailing `l` blocks up
//! to itself (its own, possibly partial, block counts as local offset 0).
//! `key_ranges` is the single source of truth for that rule; the mask type
//! and every gathered evaluation path are built from it.
//!
//! A mask stores per-query-block key-block intervals, never a dense n×n
//! bitmap, so masks stay cheap at long context lengths.

use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternError {
    ZeroBlock,
    ZeroLocalBlocks,
}

impl core::fmt::Display for PatternError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PatternError::ZeroBlock => write!(f, "block_size must be at least 1"),
            PatternError::ZeroLocalBlocks => {
                // l == 0 would leave queries at the start of a non-sink block
                // with no visible keys at all.
                write!(f, "local_blocks must be at least 1")
            }
        }
    }
}

impl core::error::Error for PatternError {}

/// Streaming-attention shape: `sink_blocks` prefix blocks every query can
/// see, plus a sliding window of the most recent `local_blocks` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsePattern {
    pub sink_blocks: usize,
    pub local_blocks: usize,
    #[serde(rename = "block_size")]
    pub block: usize,
}

impl SparsePattern {
    pub fn new(
        sink_blocks: usize,
        local_blocks: usize,
        block: usize,
    ) -> Result<Self, PatternError> {
        if block == 0 {
            return Err(PatternError::ZeroBlock);
        }
        if local_blocks == 0 {
            return Err(PatternError::ZeroLocalBlocks);
        }
        Ok(SparsePattern {
            sink_blocks,
            local_blocks,
            block,
        })
    }

    /// Desk-scale default: window of 64 tokens.
    pub fn desk() -> Self {
        SparsePattern::new(1, 3, 16).expect("static pattern is valid")
    }

    /// Production-scale shape: window of 1024 tokens.
    pub fn production() -> Self {
        SparsePattern::new(1, 7, 128).expect("static pattern is valid")
    }

    /// Upper bound on keys any query can see: `(s + l) · b`.
    pub fn window(&self) -> usize {
        (self.sink_blocks + self.local_blocks) * self.block
    }

    pub fn validate(&self) -> Result<(), PatternError> {
        SparsePattern::new(self.sink_blocks, self.local_blocks, self.block).map(|_| ())
    }

    /// Allowed key blocks for queries in block `qb`, as at most two
    /// ascending disjoint intervals (sink prefix, local window). Intervals
    /// are in block units and not truncated by causality.
    fn block_intervals(&self, qb: usize) -> [Option<Range<usize>>; 2] {
        let local_start = (qb + 1).saturating_sub(self.local_blocks);
        let sink_end = self.sink_blocks;
        if local_start <= sink_end {
            [Some(0..qb + 1), None]
        } else {
            let sink = (sink_end > 0).then(|| 0..sink_end);
            [sink, Some(local_start..qb + 1)]
        }
    }

    /// The allowed keys for query `i`, as at most two ascending, disjoint,
    /// non-empty token ranges (sink prefix, then the local window).
    pub fn key_ranges(&self, i: usize) -> Vec<Range<usize>> {
        let b = self.block;
        let mut out = Vec::with_capacity(2);
        for iv in self.block_intervals(i / b).into_iter().flatten() {
            let start = iv.start * b;
            let end = (iv.end * b).min(i + 1);
            if end > start {
                out.push(start..end);
            }
        }
        out
    }

    /// Direct evaluation of the visibility rule.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        j <= i
            && (j / self.block < self.sink_blocks
                || i / self.block - j / self.block < self.local_blocks)
    }

    /// Number of keys query `i` may attend to. O(1), no allocation, so the
    /// cost model can sum it over very long contexts.
    pub fn row_kv_count(&self, i: usize) -> usize {
        let qb = i / self.block;
        let local_start = (qb + 1).saturating_sub(self.local_blocks);
        if local_start <= self.sink_blocks {
            return i + 1;
        }
        self.sink_blocks * self.block + (i + 1 - local_start * self.block)
    }
}

/// Query→key visibility for an `n×n` causal score matrix, described by
/// key-block intervals per query block (O(n/b) storage, O(1) queries).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    repr: MaskRepr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum MaskRepr {
    /// j ≤ i, nothing else.
    Causal,
    /// Streaming intervals, stored per query block.
    Blocked {
        block: usize,
        /// `intervals[qb]`: up to two ascending key-block intervals.
        intervals: Vec<[Option<Range<usize>>; 2]>,
    },
}

impl AttnMask {
    /// Lower-triangular mask: query `i` sees keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        AttnMask {
            n,
            repr: MaskRepr::Causal,
        }
    }

    /// Causal mask restricted to the streaming pattern.
    pub fn streaming(n: usize, pattern: &SparsePattern) -> Self {
        let blocks = n.div_ceil(pattern.block).max(1);
        let intervals = (0..blocks).map(|qb| pattern.block_intervals(qb)).collect();
        AttnMask {
            n,
            repr: MaskRepr::Blocked {
                block: pattern.block,
                intervals,
            },
        }
    }

    /// Extent of the (square) score matrix this mask describes.
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < self.n && j < self.n);
        if j > i {
            return false;
        }
        match &self.repr {
            MaskRepr::Causal => true,
            MaskRepr::Blocked { block, intervals } => {
                let jb = j / block;
                intervals[i / block]
                    .iter()
                    .flatten()
                    .any(|iv| iv.contains(&jb))
            }
        }
    }

    /// Count of allowed keys for query `i`.
    pub fn allowed_in_row(&self, i: usize) -> usize {
        match &self.repr {
            MaskRepr::Causal => i + 1,
            MaskRepr::Blocked { block, intervals } => intervals[i / block]
                .iter()
                .flatten()
                .map(|iv| {
                    let start = iv.start * block;
                    let end = (iv.end * block).min(i + 1);
                    end.saturating_sub(start)
                })
                .sum(),
        }
    }

    pub fn total_allowed(&self) -> usize {
        (0..self.n).map(|i| self.allowed_in_row(i)).sum()
    }
}
