//! Per-token saliency signals consumed by the precision controller.
//!
//! Each decoded token yields a four-dimensional feature vector:
//! next-token entropy, smoothed rarity, mean attention variance over
//! heads, and top-probability confidence. Raw features live on very
//! different scales, so the controller consumes a z-scored version
//! using statistics captured at training time.

use crate::error::{Error, Result};
use crate::math;
use std::collections::HashMap;

/// The per-token feature vector [entropy, rarity, attention variance,
/// confidence]. Raw instances satisfy `entropy <= ln |V|`,
/// `confidence in [1/|V|, 1]`; standardized instances are z-scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaliencyFeatures {
    pub entropy: f64,
    pub rarity: f64,
    pub attention_variance: f64,
    pub confidence: f64,
}

impl SaliencyFeatures {
    pub fn as_array(&self) -> [f64; 4] {
        [
            self.entropy,
            self.rarity,
            self.attention_variance,
            self.confidence,
        ]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        SaliencyFeatures {
            entropy: a[0],
            rarity: a[1],
            attention_variance: a[2],
            confidence: a[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Per-feature mean/std captured from a training split. An identity
/// instance (mean 0, std 1) leaves features untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureStats {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl FeatureStats {
    pub fn identity() -> Self {
        FeatureStats {
            mean: [0.0; 4],
            std: [1.0; 4],
        }
    }

    /// Fit mean and population std per coordinate.
    pub fn fit(features: &[SaliencyFeatures]) -> Self {
        assert!(!features.is_empty(), "cannot fit stats on empty set");
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for dim in 0..4 {
            let column: Vec<f64> = features.iter().map(|f| f.as_array()[dim]).collect();
            let (m, v) = math::mean_var(&column);
            mean[dim] = m;
            std[dim] = v.sqrt();
        }
        FeatureStats { mean, std }
    }

    /// z-score with the stored statistics; std is floored at 1e-8.
    pub fn standardize(&self, f: &SaliencyFeatures) -> SaliencyFeatures {
        let raw = f.as_array();
        let mut out = [0.0; 4];
        for dim in 0..4 {
            out[dim] = (raw[dim] - self.mean[dim]) / self.std[dim].max(1e-8);
        }
        SaliencyFeatures::from_array(out)
    }
}

/// Running token-frequency state for the rarity feature. Single writer
/// per token stream; independent streams use independent counters.
#[derive(Debug, Clone, Default)]
pub struct TokenCounter {
    counts: HashMap<u32, u64>,
    total: u64,
}

impl TokenCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, token: u32) -> u64 {
        self.counts.get(&token).copied().unwrap_or(0)
    }

    /// Total tokens observed.
    pub fn total(&self) -> u64 {
        self.total
    }

    /// Number of distinct tokens observed.
    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    /// Record one occurrence of `token`.
    pub fn observe(&mut self, token: u32) {
        *self.counts.entry(token).or_insert(0) += 1;
        self.total += 1;
    }

    /// Iterate over (token, count) pairs.
    pub fn iter(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.counts.iter().map(|(&t, &c)| (t, c))
    }
}

/// Entropy in nats of the next-token distribution softmax(logits).
pub fn entropy(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::invalid_input(
            "entropy requires a vocabulary of at least 2",
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_input("entropy requires finite logits"));
    }
    Ok(math::softmax_entropy(logits))
}

/// Smoothed self-information of `token` in nats:
/// `-ln((c + 1) / (N + |V_obs| + 1))`, evaluated on the counter state
/// before the token is counted. The caller updates the counter afterwards.
pub fn rarity(token: u32, counter: &TokenCounter) -> f64 {
    let c = counter.count(token) as f64;
    let denom = counter.total() as f64 + counter.distinct() as f64 + 1.0;
    -((c + 1.0) / denom).ln()
}

/// Attention tensor of one layer: `heads` square matrices of size
/// `len x len`, row-major, with masked future positions stored as 0.
#[derive(Debug, Clone)]
pub struct AttentionTensor {
    pub heads: usize,
    pub len: usize,
    data: Vec<f64>,
}

impl AttentionTensor {
    pub fn new(heads: usize, len: usize) -> Self {
        AttentionTensor {
            heads,
            len,
            data: vec![0.0; heads * len * len],
        }
    }

    pub fn from_rows(heads: usize, len: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), heads * len * len, "tensor size mismatch");
        AttentionTensor { heads, len, data }
    }

    pub fn set(&mut self, head: usize, row: usize, col: usize, v: f64) {
        self.data[head * self.len * self.len + row * self.len + col] = v;
    }

    fn head_entries(&self, head: usize) -> &[f64] {
        let n = self.len * self.len;
        &self.data[head * n..(head + 1) * n]
    }
}

/// Mean over heads of the population variance of each head's full
/// attention matrix (all `len^2` entries, masked zeros included).
pub fn attention_variance(attn: &AttentionTensor) -> Result<f64> {
    if attn.heads == 0 || attn.len == 0 {
        return Err(Error::invalid_input("attention tensor must be non-empty"));
    }
    let mut acc = 0.0;
    for head in 0..attn.heads {
        let (_, var) = math::mean_var(attn.head_entries(head));
        acc += var;
    }
    Ok(acc / attn.heads as f64)
}

/// Streaming computation of [`attention_variance`] for a causal matrix
/// that grows one row per decode step. Rows keep the value they had
/// when computed; masked tail entries are zero.
#[derive(Debug, Clone)]
pub struct AttentionVarianceAccumulator {
    /// Per head: running sum and sum of squares over stored entries.
    sums: Vec<(f64, f64)>,
    len: usize,
}

impl AttentionVarianceAccumulator {
    pub fn new(heads: usize) -> Self {
        AttentionVarianceAccumulator {
            sums: vec![(0.0, 0.0); heads],
            len: 0,
        }
    }

    pub fn heads(&self) -> usize {
        self.sums.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Append one decode step's attention rows, one row per head. Row
    /// lengths equal the new sequence length.
    pub fn push_step(&mut self, rows: &[Vec<f64>]) {
        assert_eq!(rows.len(), self.sums.len(), "row count must match heads");
        self.len += 1;
        for (slot, row) in self.sums.iter_mut().zip(rows) {
            debug_assert_eq!(row.len(), self.len);
            for &a in row {
                slot.0 += a;
                slot.1 += a * a;
            }
        }
    }

    /// Variance over the implied `len x len` matrices. Zero for an
    /// empty or single-entry matrix of constant value.
    pub fn variance(&self) -> f64 {
        if self.len == 0 {
            return 0.0;
        }
        let n = (self.len * self.len) as f64;
        let mut acc = 0.0;
        for &(s1, s2) in &self.sums {
            let mean = s1 / n;
            acc += (s2 / n - mean * mean).max(0.0);
        }
        acc / self.sums.len() as f64
    }
}

/// Assemble the feature vector for one decode step. `logits` are the
/// final-layer next-token logits, `token` is the token whose key/value
/// pair is being stored, `counter` holds pre-update frequency state.
/// With `stats` supplied the result is standardized; the controller
/// always consumes standardized features.
pub fn build_features(
    logits: &[f64],
    token: u32,
    counter: &TokenCounter,
    attn: &AttentionTensor,
    stats: Option<&FeatureStats>,
) -> Result<SaliencyFeatures> {
    let h = entropy(logits)?;
    let r = rarity(token, counter);
    let v = attention_variance(attn)?;
    let c = math::softmax(logits)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let raw = SaliencyFeatures {
        entropy: h,
        rarity: r,
        attention_variance: v,
        confidence: c,
    };
    Ok(match stats {
        Some(s) => s.standardize(&raw),
        None => raw,
    })
}
