//! Layer-calibrated streaming sparse attention at desk scale.
//!
//! The crate trains a small decoder-only transformer whose attention layers
//! can run in three modes (full causal, streaming sparse over sink + local
//! blocks, or a gated blend of both), calibrates per-layer gates to rank
//! layers by how much they need full attention, sparsifies the lowest-ranked
//! half, and retrains from a rewound checkpoint. A bounded-cache decode
//! runtime and an analytic cost model sit on top of the same mask rule.
//!
//! The crate is `no_std`-compatible (with `alloc`); the `std` feature (on by
//! default) only switches float math from `libm` to the platform intrinsics.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod check;
pub mod checkpoint;
pub mod costmodel;
pub mod data;
pub mod graph;
pub mod mask;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod runtime;
pub mod tensor;

mod fmath;

pub use graph::{Graph, NodeId};
pub use mask::{AttnMask, SparsePattern};
pub use model::{LayerMode, Model, ModelConfig};
pub use tensor::Tensor;
