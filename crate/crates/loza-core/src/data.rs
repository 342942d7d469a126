//! Byte tokenizer and synthetic sequence tasks.
//!
//! Three task families with known information structure:
//!
//! * `grammar` — deterministic walk through a fixed permutation of the
//!   lowercase alphabet; the next token is a function of the current one,
//!   so a one-token window suffices to predict it.
//! * `copy`    — a random block repeated end to end; prediction requires
//!   attending exactly one period back.
//! * `passkey` — a marked digit value embedded early in locally-predictable
//!   filler, queried near the end. The needle sits outside both the sink
//!   prefix and the sliding window of the streaming pattern under test, so
//!   only full attention can recover it.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::IGNORE_TARGET;
use crate::mask::SparsePattern;

/// Token ids 0..=255 are raw bytes; markers sit above.
pub const VAL_MARKER: usize = 256;
pub const QUERY_MARKER: usize = 257;
pub const VOCAB_SIZE: usize = 258;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataError {
    /// A token id with no byte representation (a marker or out of range).
    NotAByte { token: usize },
    /// Passkey geometry that the requested lengths cannot satisfy.
    BadLayout(&'static str),
}

impl core::fmt::Display for DataError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DataError::NotAByte { token } => write!(f, "token {token} is not a byte"),
            DataError::BadLayout(why) => write!(f, "passkey layout invalid: {why}"),
        }
    }
}

impl core::error::Error for DataError {}

pub fn encode(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn decode(tokens: &[usize]) -> Result<Vec<u8>, DataError> {
    tokens
        .iter()
        .map(|&t| {
            if t < 256 {
                Ok(t as u8)
            } else {
                Err(DataError::NotAByte { token: t })
            }
        })
        .collect()
}

/// One training/eval sequence: `targets[i]` is the label scored at position
/// `i` (usually the next token), or [`IGNORE_TARGET`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Sample {
    /// Positions that contribute to the loss.
    pub fn scored_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != IGNORE_TARGET)
            .map(|(i, _)| i)
    }
}

// ── grammar ──

const ALPHABET_START: u8 = b'a';
const ALPHABET_LEN: usize = 26;
/// The permutation is a constant of the task, not of the sample stream.
const GRAMMAR_PERM_SEED: u64 = 0xA11CE;

/// The fixed successor table: `perm[c - 'a']` is the byte following `c`.
pub fn grammar_successors() -> [u8; ALPHABET_LEN] {
    let mut rng = ChaCha8Rng::seed_from_u64(GRAMMAR_PERM_SEED);
    let mut order: Vec<u8> = (0..ALPHABET_LEN as u8).collect();
    order.shuffle(&mut rng);
    // Successor of the i-th element of the shuffled cycle is the next one,
    // so the table is a single 26-cycle: every state is recurrent.
    let mut succ = [0u8; ALPHABET_LEN];
    for i in 0..ALPHABET_LEN {
        let from = order[i] as usize;
        let to = order[(i + 1) % ALPHABET_LEN];
        succ[from] = to + ALPHABET_START;
    }
    succ
}

fn grammar_walk<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<usize> {
    let succ = grammar_successors();
    let mut c = ALPHABET_START + rng.random_range(0..ALPHABET_LEN as u8);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(c as usize);
        c = succ[(c - ALPHABET_START) as usize];
    }
    out
}

/// Deterministic walk from a random start; every position after the first
/// is exactly predictable from its predecessor.
pub fn grammar_sample<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Sample {
    assert!(len >= 2, "a walk needs at least two tokens");
    let tokens = grammar_walk(len, rng);
    let mut targets: Vec<usize> = tokens[1..].to_vec();
    targets.push(IGNORE_TARGET);
    Sample { tokens, targets }
}

// ── copy ──

/// A random byte block of `period` tokens tiled to `len`. Only the second
/// and later repetitions are scored; the first pass is unpredictable.
pub fn copy_sample<R: Rng + ?Sized>(len: usize, period: usize, rng: &mut R) -> Sample {
    assert!(period >= 1 && len > period, "need at least one full repeat");
    let block: Vec<usize> = (0..period)
        .map(|_| (ALPHABET_START + rng.random_range(0..ALPHABET_LEN as u8)) as usize)
        .collect();
    let tokens: Vec<usize> = (0..len).map(|i| block[i % period]).collect();
    let mut targets = vec![IGNORE_TARGET; len];
    for i in period - 1..len - 1 {
        targets[i] = tokens[i + 1];
    }
    Sample { tokens, targets }
}

// ── passkey ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PasskeyConfig {
    pub seq_len: usize,
    /// Absolute position of the value marker; the digits follow it.
    pub needle_pos: usize,
    pub digits: usize,
}

impl PasskeyConfig {
    /// Query marker position: the digits echo right after it and the
    /// sequence ends with the last digit.
    pub fn query_pos(&self) -> usize {
        self.seq_len - self.digits - 1
    }

    /// Distance the answer must be carried, marker to marker.
    pub fn distance(&self) -> usize {
        self.query_pos() - self.needle_pos
    }

    /// Checks the layout fits and that the needle is invisible to the given
    /// streaming pattern at query time: outside the sink prefix and ahead
    /// of the local window of every scored position.
    pub fn validate_against(&self, pattern: &SparsePattern) -> Result<(), DataError> {
        if self.digits == 0 {
            return Err(DataError::BadLayout("digits must be nonzero"));
        }
        if self.needle_pos + self.digits + 1 >= self.query_pos() {
            return Err(DataError::BadLayout("needle overlaps query"));
        }
        if self.query_pos() + self.digits >= self.seq_len {
            return Err(DataError::BadLayout("echo runs past the end"));
        }
        let sink_end = pattern.sink_blocks * pattern.block;
        if self.needle_pos < sink_end + pattern.block {
            // Keep a whole block of slack so the digits stay out too.
            return Err(DataError::BadLayout("needle inside or adjacent to sink"));
        }
        for q in self.query_pos()..self.query_pos() + self.digits {
            for j in self.needle_pos..=self.needle_pos + self.digits {
                if pattern.allows(q, j) {
                    return Err(DataError::BadLayout("needle visible through window"));
                }
            }
        }
        Ok(())
    }
}

/// Filler is a grammar walk; the needle is `VAL d₀…d₍k₋₁₎`, the query is
/// `QUERY` followed by the digits again (teacher forcing). Only the digit
/// predictions after `QUERY` are scored.
pub fn passkey_sample<R: Rng + ?Sized>(cfg: &PasskeyConfig, rng: &mut R) -> Sample {
    let mut tokens = grammar_walk(cfg.seq_len, rng);
    let digits: Vec<usize> = (0..cfg.digits)
        .map(|_| (b'0' + rng.random_range(0..10u8)) as usize)
        .collect();
    tokens[cfg.needle_pos] = VAL_MARKER;
    for (i, &d) in digits.iter().enumerate() {
        tokens[cfg.needle_pos + 1 + i] = d;
    }
    let q = cfg.query_pos();
    tokens[q] = QUERY_MARKER;
    for (i, &d) in digits.iter().enumerate() {
        tokens[q + 1 + i] = d;
    }
    let mut targets = vec![IGNORE_TARGET; cfg.seq_len];
    // Position q sees QUERY and must emit d₀; position q+1 sees d₀ and must
    // emit d₁; and so on.
    for (i, &d) in digits.iter().enumerate() {
        targets[q + i] = d;
    }
    Sample { tokens, targets }
}
