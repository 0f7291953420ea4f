//! Attention-based relation network for multi-label classification.
//!
//! Per-unit features are refined by parallel relation layers (scaled
//! dot-product attention with top-k aggregation), fused through sigmoid
//! gates and classified per unit. Training minimizes a class-balanced
//! cross-entropy plus a pairwise loss derived from label co-occurrence
//! statistics, with relation-layer dropout and Nesterov SGD.

pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod numeric;
pub mod train;

pub use error::{Error, Result};
