//! A seeded toy causal transformer decoder with a heterogeneous-precision
//! KV cache. The model is deliberately tiny: its job is to exercise cache
//! growth, per-step saliency features, and precision-policy dispatch, with
//! an exact working-precision decode of the same weights serving as the
//! accuracy reference.

use crate::controller::{self, ControllerParams};
use crate::error::{Error, Result};
use crate::math::{self, Matrix};
use crate::quant::{self, BitWidth, QuantizedVector};
use crate::saliency::{
    AttentionVarianceAccumulator, SaliencyFeatures, TokenCounter,
};
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Dimensions and seed of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TinyModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for TinyModelConfig {
    fn default() -> Self {
        TinyModelConfig {
            vocab: 64,
            d_model: 32,
            heads: 2,
            head_dim: 16,
            layers: 2,
            seed: 0,
        }
    }
}

impl TinyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::config("vocab must be at least 2"));
        }
        if self.d_model == 0 || self.heads == 0 || self.head_dim == 0 || self.layers == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.heads * self.head_dim != self.d_model {
            return Err(Error::config(format!(
                "d_model ({}) must equal heads*head_dim ({}*{})",
                self.d_model, self.heads, self.head_dim
            )));
        }
        Ok(())
    }
}

struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    ff1: Matrix, // 4*d_model x d_model
    ff2: Matrix, // d_model x 4*d_model
}

/// Seed-defined decoder weights: token embeddings (tied to the
/// unembedding), per-layer attention and feed-forward projections.
/// Pre-norm residual blocks, sinusoidal position encoding.
pub struct TinyModel {
    pub config: TinyModelConfig,
    embedding: Matrix, // vocab x d_model
    layers: Vec<LayerWeights>,
}

/// Deterministically build a model from its config; weights are drawn
/// uniform(-0.1, 0.1) from a seeded generator.
pub fn build_model(config: &TinyModelConfig) -> Result<TinyModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = |rows: usize, cols: usize| -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for w in m.iter_mut() {
            *w = rng.gen_range(-0.1..0.1);
        }
        m
    };
    let d = config.d_model;
    let embedding = draw(config.vocab, d);
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            wq: draw(d, d),
            wk: draw(d, d),
            wv: draw(d, d),
            wo: draw(d, d),
            ff1: draw(4 * d, d),
            ff2: draw(d, 4 * d),
        })
        .collect();
    Ok(TinyModel {
        config: *config,
        embedding,
        layers,
    })
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let (mean, var) = math::mean_var(x);
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().map(|&v| (v - mean) * inv).collect()
}

fn positional_encoding(position: usize, d_model: usize) -> Vec<f64> {
    let mut pe = vec![0.0; d_model];
    for i in 0..d_model / 2 {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / d_model as f64);
        let angle = position as f64 * freq;
        pe[2 * i] = angle.sin();
        pe[2 * i + 1] = angle.cos();
    }
    pe
}

fn split_heads(x: &[f64], heads: usize, head_dim: usize) -> Vec<Vec<f64>> {
    (0..heads)
        .map(|h| x[h * head_dim..(h + 1) * head_dim].to_vec())
        .collect()
}

// ---------------------------------------------------------------------------
// Caches
// ---------------------------------------------------------------------------

/// Read access to per-layer cached key/value vectors at working precision.
pub trait KvRead {
    /// Number of cached positions (uniform across layers).
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn key_into(&self, layer: usize, pos: usize, head: usize, out: &mut [f64]);
    fn value_into(&self, layer: usize, pos: usize, head: usize, out: &mut [f64]);
}

/// One cached token at one layer: per-head quantized keys and values,
/// all sharing the token's assigned bit-width.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub keys: Vec<QuantizedVector>,
    pub values: Vec<QuantizedVector>,
    pub bits: BitWidth,
}

/// Append-only per-layer store of quantized KV entries at heterogeneous
/// precision. Every layer's entry at a position carries the same width.
#[derive(Debug, Clone)]
pub struct HeteroKVCache {
    layers: Vec<Vec<CacheEntry>>,
}

impl HeteroKVCache {
    pub fn new(layers: usize) -> Self {
        HeteroKVCache {
            layers: vec![Vec::new(); layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Quantize one token's per-layer, per-head keys and values at
    /// `bits` and append them. `per_layer[l] = (keys, values)`, each
    /// `[head][d]`.
    pub fn append(
        &mut self,
        per_layer: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)],
        bits: BitWidth,
    ) -> Result<u64> {
        if per_layer.len() != self.layers.len() {
            return Err(Error::invalid_input("layer count mismatch on append"));
        }
        let mut cost = 0u64;
        for (layer, (keys, values)) in self.layers.iter_mut().zip(per_layer) {
            let keys: Vec<QuantizedVector> = keys
                .iter()
                .map(|k| quant::quantize(k, bits))
                .collect::<Result<_>>()?;
            let values: Vec<QuantizedVector> = values
                .iter()
                .map(|v| quant::quantize(v, bits))
                .collect::<Result<_>>()?;
            cost += keys.iter().map(quant::storage_bits).sum::<u64>();
            cost += values.iter().map(quant::storage_bits).sum::<u64>();
            layer.push(CacheEntry { keys, values, bits });
        }
        Ok(cost)
    }

    pub fn bits_at(&self, pos: usize) -> BitWidth {
        self.layers[0][pos].bits
    }

    pub fn entry(&self, layer: usize, pos: usize) -> &CacheEntry {
        &self.layers[layer][pos]
    }

    /// Total storage across all layers, heads, and positions.
    pub fn total_storage_bits(&self) -> u64 {
        self.layers
            .iter()
            .flatten()
            .map(|e| {
                e.keys.iter().map(quant::storage_bits).sum::<u64>()
                    + e.values.iter().map(quant::storage_bits).sum::<u64>()
            })
            .sum()
    }
}

impl KvRead for HeteroKVCache {
    fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    fn key_into(&self, layer: usize, pos: usize, head: usize, out: &mut [f64]) {
        quant::dequantize_into(&self.layers[layer][pos].keys[head], out);
    }

    fn value_into(&self, layer: usize, pos: usize, head: usize, out: &mut [f64]) {
        quant::dequantize_into(&self.layers[layer][pos].values[head], out);
    }
}

/// Codec-free cache backing the exact reference decode.
#[derive(Debug, Clone)]
pub struct ExactKvCache {
    /// [layer][pos] -> (keys [head][d], values [head][d])
    layers: Vec<Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>>,
}

impl ExactKvCache {
    pub fn new(layers: usize) -> Self {
        ExactKvCache {
            layers: vec![Vec::new(); layers],
        }
    }

    pub fn append(&mut self, per_layer: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)]) {
        for (layer, kv) in self.layers.iter_mut().zip(per_layer) {
            layer.push(kv.clone());
        }
    }

    pub fn keys(&self, layer: usize, pos: usize) -> &[Vec<f64>] {
        &self.layers[layer][pos].0
    }

    pub fn values(&self, layer: usize, pos: usize) -> &[Vec<f64>] {
        &self.layers[layer][pos].1
    }
}

impl KvRead for ExactKvCache {
    fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    fn key_into(&self, layer: usize, pos: usize, head: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.layers[layer][pos].0[head]);
    }

    fn value_into(&self, layer: usize, pos: usize, head: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.layers[layer][pos].1[head]);
    }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Scaled dot-product attention of per-head queries over a cache layer,
/// optionally extended with the current token's exact key/value pair.
/// Returns the concatenated per-head outputs and the per-head softmax
/// rows.
fn attend(
    cache: &dyn KvRead,
    layer: usize,
    query_heads: &[Vec<f64>],
    current: Option<(&[Vec<f64>], &[Vec<f64>])>,
    head_dim: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let cached = cache.len();
    let total = cached + usize::from(current.is_some());
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Vec::with_capacity(query_heads.len() * head_dim);
    let mut rows = Vec::with_capacity(query_heads.len());
    let mut scratch = vec![0.0; head_dim];

    for (h, q) in query_heads.iter().enumerate() {
        let mut scores = Vec::with_capacity(total);
        for pos in 0..cached {
            cache.key_into(layer, pos, h, &mut scratch);
            scores.push(math::dot(q, &scratch) * scale);
        }
        if let Some((keys, _)) = current {
            scores.push(math::dot(q, &keys[h]) * scale);
        }
        let weights = math::softmax(&scores);
        let mut acc = vec![0.0; head_dim];
        for (pos, &w) in weights.iter().take(cached).enumerate() {
            cache.value_into(layer, pos, h, &mut scratch);
            for (a, &v) in acc.iter_mut().zip(&scratch) {
                *a += w * v;
            }
        }
        if let Some((_, values)) = current {
            let w = weights[total - 1];
            for (a, &v) in acc.iter_mut().zip(&values[h]) {
                *a += w * v;
            }
        }
        out.extend_from_slice(&acc);
        rows.push(weights);
    }
    (out, rows)
}

/// Attention over the cached positions of one layer only (no current
/// token), the read path used once a token's entries are stored.
pub fn attention_with_hetero_cache(
    query_heads: &[Vec<f64>],
    cache: &HeteroKVCache,
    layer: usize,
) -> Result<Vec<f64>> {
    if cache.len() == 0 {
        return Err(Error::invalid_input("attention over an empty cache"));
    }
    let head_dim = query_heads
        .first()
        .map(|q| q.len())
        .ok_or_else(|| Error::invalid_input("attention requires at least one head"))?;
    Ok(attend(cache, layer, query_heads, None, head_dim).0)
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

/// How a decode session chooses the storage width for each token.
#[derive(Debug, Clone)]
pub enum PrecisionPolicy {
    /// Half-precision storage for everything.
    Full16,
    /// One fixed width for everything.
    Static(BitWidth),
    /// Entropy bucketed against three increasing thresholds.
    Rule { thresholds: [f64; 3] },
    /// The trained controller.
    Adaptive(ControllerParams),
}

impl PrecisionPolicy {
    pub fn validate(&self) -> Result<()> {
        if let PrecisionPolicy::Rule { thresholds } = self {
            if !(thresholds[0] < thresholds[1] && thresholds[1] < thresholds[2]) {
                return Err(Error::config(
                    "rule thresholds must be strictly increasing",
                ));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match self {
            PrecisionPolicy::Full16 => "full16".into(),
            PrecisionPolicy::Static(b) => format!("static{b}"),
            PrecisionPolicy::Rule { .. } => "rule".into(),
            PrecisionPolicy::Adaptive(_) => "adaptive".into(),
        }
    }
}

/// Map raw features to a storage width under the given policy. The
/// adaptive branch standardizes internally with the controller's
/// stored statistics.
pub fn apply_policy(policy: &PrecisionPolicy, features: &SaliencyFeatures) -> BitWidth {
    match policy {
        PrecisionPolicy::Full16 => BitWidth::B16,
        PrecisionPolicy::Static(b) => *b,
        PrecisionPolicy::Rule { thresholds } => {
            let h = features.entropy;
            if h < thresholds[0] {
                BitWidth::B2
            } else if h < thresholds[1] {
                BitWidth::B4
            } else if h < thresholds[2] {
                BitWidth::B8
            } else {
                BitWidth::B16
            }
        }
        PrecisionPolicy::Adaptive(params) => {
            let z = params.feature_stats.standardize(features);
            let logits = controller::forward(params, &z).expect("finite features");
            controller::select_bitwidth(&controller::class_probs(&logits))
        }
    }
}

// ---------------------------------------------------------------------------
// Decode
// ---------------------------------------------------------------------------

enum SessionCache {
    Hetero(HeteroKVCache),
    Exact(ExactKvCache),
}

impl SessionCache {
    fn reader(&self) -> &dyn KvRead {
        match self {
            SessionCache::Hetero(c) => c,
            SessionCache::Exact(c) => c,
        }
    }
}

/// Everything produced by one decode step.
pub struct StepOutcome {
    pub logits: Vec<f64>,
    pub features: SaliencyFeatures,
    pub bits: BitWidth,
    pub storage_bits: u64,
    pub next_token: u32,
    /// Final-layer attention output (heads concatenated, before the
    /// output projection); the dual-run distortion is measured on it.
    pub attn_output: Vec<f64>,
}

/// Per-layer queries captured during a recorded exact run, used to
/// build oracle probes.
pub struct RecordedStep {
    /// [layer][head][d]
    pub queries: Vec<Vec<Vec<f64>>>,
}

/// A single decode stream: model reference, growing cache, token
/// counter, and the attention-variance accumulator for the final layer.
/// Single writer; run independent sessions for independent streams.
pub struct DecodeSession<'m> {
    model: &'m TinyModel,
    cache: SessionCache,
    counter: TokenCounter,
    attn_var: AttentionVarianceAccumulator,
    policy: Option<PrecisionPolicy>,
    position: usize,
    record_queries: bool,
    recorded: Vec<RecordedStep>,
}

impl<'m> DecodeSession<'m> {
    /// A policy-driven session with a quantized cache, or (with `None`)
    /// the exact working-precision reference.
    pub fn new(model: &'m TinyModel, policy: Option<PrecisionPolicy>) -> Self {
        let cache = match policy {
            Some(_) => SessionCache::Hetero(HeteroKVCache::new(model.config.layers)),
            None => SessionCache::Exact(ExactKvCache::new(model.config.layers)),
        };
        DecodeSession {
            model,
            cache,
            counter: TokenCounter::new(),
            attn_var: AttentionVarianceAccumulator::new(model.config.heads),
            policy,
            position: 0,
            record_queries: false,
            recorded: Vec::new(),
        }
    }

    pub fn with_query_recording(mut self) -> Self {
        self.record_queries = true;
        self
    }

    pub fn len(&self) -> usize {
        self.position
    }

    pub fn is_empty(&self) -> bool {
        self.position == 0
    }

    pub fn hetero_cache(&self) -> Option<&HeteroKVCache> {
        match &self.cache {
            SessionCache::Hetero(c) => Some(c),
            SessionCache::Exact(_) => None,
        }
    }

    pub fn exact_cache(&self) -> Option<&ExactKvCache> {
        match &self.cache {
            SessionCache::Exact(c) => Some(c),
            SessionCache::Hetero(_) => None,
        }
    }

    pub fn recorded_steps(&self) -> &[RecordedStep] {
        &self.recorded
    }

    /// Process one input token: run the forward pass attending over the
    /// cached history plus the token's own exact K/V, extract features
    /// from the final layer, pick a width, then quantize and append the
    /// token's K/V at every layer.
    pub fn decode_step(&mut self, token: u32) -> Result<StepOutcome> {
        let cfg = &self.model.config;
        if token as usize >= cfg.vocab {
            return Err(Error::invalid_input(format!(
                "token {token} out of vocabulary ({})",
                cfg.vocab
            )));
        }

        let mut x: Vec<f64> = self.model.embedding.row(token as usize).to_vec();
        let pe = positional_encoding(self.position, cfg.d_model);
        for (xi, pi) in x.iter_mut().zip(&pe) {
            *xi += pi;
        }

        let mut per_layer_kv: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> =
            Vec::with_capacity(cfg.layers);
        let mut final_rows: Vec<Vec<f64>> = Vec::new();
        let mut final_attn_output: Vec<f64> = Vec::new();
        let mut recorded_queries: Vec<Vec<Vec<f64>>> = Vec::new();

        for (l, layer) in self.model.layers.iter().enumerate() {
            let xn = layer_norm(&x);
            let q = split_heads(&layer.wq.matvec(&xn), cfg.heads, cfg.head_dim);
            let k = split_heads(&layer.wk.matvec(&xn), cfg.heads, cfg.head_dim);
            let v = split_heads(&layer.wv.matvec(&xn), cfg.heads, cfg.head_dim);

            let (attn_out, rows) = attend(
                self.cache.reader(),
                l,
                &q,
                Some((&k, &v)),
                cfg.head_dim,
            );
            if l == cfg.layers - 1 {
                final_rows = rows;
                final_attn_output = attn_out.clone();
            }
            if self.record_queries {
                recorded_queries.push(q);
            }
            per_layer_kv.push((k, v));

            let projected = layer.wo.matvec(&attn_out);
            for (xi, pi) in x.iter_mut().zip(&projected) {
                *xi += pi;
            }
            let xn2 = layer_norm(&x);
            let hidden: Vec<f64> = layer
                .ff1
                .matvec(&xn2)
                .into_iter()
                .map(math::relu)
                .collect();
            let ff_out = layer.ff2.matvec(&hidden);
            for (xi, pi) in x.iter_mut().zip(&ff_out) {
                *xi += pi;
            }
        }

        let final_norm = layer_norm(&x);
        let logits = self.model.embedding.matvec(&final_norm);

        // Features come from the final layer's state at this step: the
        // accumulator already includes the step's attention row.
        self.attn_var.push_step(&final_rows);
        let features = SaliencyFeatures {
            entropy: crate::saliency::entropy(&logits)?,
            rarity: crate::saliency::rarity(token, &self.counter),
            attention_variance: self.attn_var.variance(),
            confidence: math::softmax(&logits)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max),
        };
        self.counter.observe(token);

        let bits = match &self.policy {
            Some(policy) => apply_policy(policy, &features),
            None => BitWidth::B16,
        };
        let storage_bits = match &mut self.cache {
            SessionCache::Hetero(cache) => cache.append(&per_layer_kv, bits)?,
            SessionCache::Exact(cache) => {
                cache.append(&per_layer_kv);
                // Reference accounting: FP16-equivalent payload.
                (cfg.layers * cfg.heads * 2 * cfg.head_dim * 16) as u64
            }
        };
        if self.record_queries {
            self.recorded.push(RecordedStep {
                queries: recorded_queries,
            });
        }
        self.position += 1;

        Ok(StepOutcome {
            next_token: math::argmax(&logits) as u32,
            features,
            bits,
            storage_bits,
            attn_output: final_attn_output,
            logits,
        })
    }
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

/// Per processed token: the input token, its assigned width, raw
/// features, storage cost, and the greedy prediction made at the step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub token: u32,
    pub bits: BitWidth,
    pub features: SaliencyFeatures,
    pub storage_bits: u64,
    pub next_token: u32,
}

/// The record of one decode run: prompt tokens first, then generated
/// tokens, one record per processed token.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub records: Vec<StepRecord>,
    pub prompt_len: usize,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_storage_bits(&self) -> u64 {
        self.records.iter().map(|r| r.storage_bits).sum()
    }
}

fn run_session(
    session: &mut DecodeSession<'_>,
    prompt: &[u32],
    n_steps: usize,
) -> Result<DecodeTrace> {
    if prompt.is_empty() {
        return Err(Error::invalid_input("prompt must be non-empty"));
    }
    let mut records = Vec::with_capacity(prompt.len() + n_steps);
    let mut input = prompt[0];
    for step in 0..prompt.len() + n_steps {
        let out = session.decode_step(input)?;
        records.push(StepRecord {
            token: input,
            bits: out.bits,
            features: out.features,
            storage_bits: out.storage_bits,
            next_token: out.next_token,
        });
        input = if step + 1 < prompt.len() {
            prompt[step + 1]
        } else {
            out.next_token
        };
    }
    Ok(DecodeTrace {
        records,
        prompt_len: prompt.len(),
    })
}

/// Prefill the prompt and greedily decode `n_steps` tokens under one
/// policy. The prompt passes through the same per-token policy path as
/// generated tokens.
pub fn generate(
    model: &TinyModel,
    prompt: &[u32],
    n_steps: usize,
    policy: &PrecisionPolicy,
) -> Result<DecodeTrace> {
    policy.validate()?;
    let mut session = DecodeSession::new(model, Some(policy.clone()));
    run_session(&mut session, prompt, n_steps)
}

/// Output of a lockstep dual run of one policy against the exact
/// reference on a shared token stream.
#[derive(Debug, Clone)]
pub struct DualRunResult {
    pub policy_trace: DecodeTrace,
    pub reference_trace: DecodeTrace,
    /// Per-step relative L2 error of the final-layer attention output.
    pub distortions: Vec<f64>,
    /// Fraction of the `n_steps` generation decisions where the policy
    /// path's greedy choice matches the reference's.
    pub token_agreement: f64,
}

/// Run the policy path and the exact reference in lockstep on the same
/// inputs. Both consume the reference's greedy continuation, so every
/// step compares the two paths under an identical history and the
/// per-step numbers isolate codec error.
pub fn dual_generate(
    model: &TinyModel,
    prompt: &[u32],
    n_steps: usize,
    policy: &PrecisionPolicy,
) -> Result<DualRunResult> {
    policy.validate()?;
    if prompt.is_empty() {
        return Err(Error::invalid_input("prompt must be non-empty"));
    }
    let mut policy_session = DecodeSession::new(model, Some(policy.clone()));
    let mut reference_session = DecodeSession::new(model, None);

    let total = prompt.len() + n_steps;
    let mut policy_records = Vec::with_capacity(total);
    let mut reference_records = Vec::with_capacity(total);
    let mut distortions = Vec::with_capacity(total);
    let mut agreed = 0usize;
    let mut input = prompt[0];

    for step in 0..total {
        let p = policy_session.decode_step(input)?;
        let r = reference_session.decode_step(input)?;

        let norm = math::l2_norm(&r.attn_output).max(1e-12);
        let err: f64 = p
            .attn_output
            .iter()
            .zip(&r.attn_output)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        distortions.push(err / norm);

        let generating = step + 1 >= prompt.len();
        if generating && step < prompt.len() + n_steps - 1 {
            // This prediction becomes part of the stream.
            if p.next_token == r.next_token {
                agreed += 1;
            }
        }

        policy_records.push(StepRecord {
            token: input,
            bits: p.bits,
            features: p.features,
            storage_bits: p.storage_bits,
            next_token: p.next_token,
        });
        reference_records.push(StepRecord {
            token: input,
            bits: r.bits,
            features: r.features,
            storage_bits: r.storage_bits,
            next_token: r.next_token,
        });

        input = if step + 1 < prompt.len() {
            prompt[step + 1]
        } else {
            r.next_token
        };
    }

    let token_agreement = if n_steps == 0 {
        1.0
    } else {
        agreed as f64 / n_steps as f64
    };
    Ok(DualRunResult {
        policy_trace: DecodeTrace {
            records: policy_records,
            prompt_len: prompt.len(),
        },
        reference_trace: DecodeTrace {
            records: reference_records,
            prompt_len: prompt.len(),
        },
        distortions,
        token_agreement,
    })
}

/// An exact reference run that also keeps the full per-layer cache and
/// the per-step queries, the raw material for oracle labeling.
pub struct RecordedRun {
    pub trace: DecodeTrace,
    /// [layer][head][pos][d]
    pub keys: Vec<Vec<Vec<Vec<f64>>>>,
    /// [layer][head][pos][d]
    pub values: Vec<Vec<Vec<Vec<f64>>>>,
    /// [step][layer][head][d]
    pub queries: Vec<Vec<Vec<Vec<f64>>>>,
}

pub fn generate_recorded(
    model: &TinyModel,
    prompt: &[u32],
    n_steps: usize,
) -> Result<RecordedRun> {
    let mut session = DecodeSession::new(model, None).with_query_recording();
    let trace = run_session(&mut session, prompt, n_steps)?;
    let cfg = &model.config;
    let cache = session.exact_cache().expect("reference session");
    let positions = cache.len();

    let mut keys =
        vec![vec![Vec::with_capacity(positions); cfg.heads]; cfg.layers];
    let mut values =
        vec![vec![Vec::with_capacity(positions); cfg.heads]; cfg.layers];
    for l in 0..cfg.layers {
        for pos in 0..positions {
            for h in 0..cfg.heads {
                keys[l][h].push(cache.keys(l, pos)[h].clone());
                values[l][h].push(cache.values(l, pos)[h].clone());
            }
        }
    }
    let queries = session
        .recorded
        .iter()
        .map(|s| s.queries.clone())
        .collect();
    Ok(RecordedRun {
        trace,
        keys,
        values,
        queries,
    })
}
