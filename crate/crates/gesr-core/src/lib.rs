//! Generative early-stage ranking (GESR).
//!
//! A desk-scale, fully testable implementation of a mixture-of-attention
//! ranking architecture: hard-matching attention over user/item feature
//! pairs, a target-aware self-attention stack over the engagement sequence,
//! read-once and non-read-once cross attention, and multi-logit
//! parameterized gating, plus a two-tower baseline, a synthetic-data
//! ablation harness, and a cached serving path that reproduces the direct
//! forward pass bit for bit.

pub mod attention;
pub mod cli;
pub mod error;
pub mod features;
pub mod hma;
pub mod model;
pub mod numerics;
pub mod serving;
pub mod training;
pub mod verify;

pub use error::{GesrError, Result};
