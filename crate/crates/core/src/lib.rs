//! Adaptive per-token KV-cache quantization.
//!
//! During autoregressive decoding, every cached key/value pair is stored
//! at one of four precisions (2/4/8-bit affine codes or FP16). A learned
//! controller picks the precision per token from lightweight saliency
//! features, trading cache footprint against attention fidelity. The
//! crate bundles the codecs, the feature extractors, the controller and
//! its trainer, a seeded toy decoder to exercise the cache machinery,
//! and a benchmark harness that compares precision policies.

pub mod bench;
pub mod controller;
pub mod engine;
pub mod error;
pub mod math;
pub mod quant;
pub mod saliency;
pub mod trainer;

pub use error::{Error, Result};
