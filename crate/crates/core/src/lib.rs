//! Per-head view-restricted multimodal attention.
//!
//! Each attention head of a fusion layer is pinned to one *view*: either
//! self-attention inside each modality or cross-attention between one pair
//! of modalities. The crate provides the exact attention-cost model of the
//! self, cross, multimodal, bottleneck and per-head-view patterns, a dense
//! implementation of the layers with reverse-mode gradients, layer-wise view
//! allocation strategies and a small classifier trained on a synthetic
//! parity task.

pub mod attention;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod tape;
pub mod training;
pub mod viewconfig;

pub use error::{Error, Result};
