//! Controller training: oracle labeling, the composite
//! classification/latency/quality loss with exact analytic gradients,
//! Adam, and the stratified training loop.

use crate::controller::{
    self, ControllerParams, MlpParams, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::math;
use crate::quant::{self, BitWidth, ALL_BIT_WIDTHS};
use crate::saliency::{FeatureStats, SaliencyFeatures};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Bit-traffic latency costs per class, normalized so FP16 = 1.
pub const DEFAULT_COST: [f64; 4] = [0.125, 0.25, 0.5, 1.0];

/// One labeled token: raw (pre-standardization) features, the oracle
/// bit-width, a latency proxy, and the quality at the labeled class.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: SaliencyFeatures,
    pub label: BitWidth,
    pub latency: f64,
    pub quality: f64,
}

/// Weights and per-class constants of the composite training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub cost: [f64; 4],
    pub quality_scores: [f64; 4],
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::invalid_input("loss weights must be non-negative"));
        }
        if !self.cost.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid_input(
                "latency cost must be strictly increasing in class index",
            ));
        }
        if self
            .quality_scores
            .iter()
            .any(|q| !(0.0..=1.0).contains(q))
        {
            return Err(Error::invalid_input("quality scores must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Loss value and its three components:
/// `total = alpha·cross_entropy + beta·latency + gamma·quality`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub latency: f64,
    pub quality: f64,
}

// ---------------------------------------------------------------------------
// Oracle labeling
// ---------------------------------------------------------------------------

/// One probe query against a slot: per-head query vectors and the
/// causal context length visible to the probe.
#[derive(Debug, Clone)]
pub struct OracleProbe {
    /// [head][d]
    pub queries: Vec<Vec<f64>>,
    /// Number of cache positions visible to this probe (> target).
    pub len: usize,
}

/// Exact cached keys/values of one layer, the target position whose
/// key/value pair gets quantized, and the probes evaluated against it.
#[derive(Debug)]
pub struct OracleSlot<'a> {
    /// [head][pos][d]
    pub keys: &'a [Vec<Vec<f64>>],
    /// [head][pos][d]
    pub values: &'a [Vec<Vec<f64>>],
    pub target: usize,
    pub probes: Vec<OracleProbe>,
}

/// Scaled dot-product attention of one probe over positions
/// `0..len`, heads concatenated, with the target position's key/value
/// optionally replaced by a codec round trip.
fn probe_output(
    slot: &OracleSlot<'_>,
    probe: &OracleProbe,
    replacement: Option<&[(Vec<f64>, Vec<f64>)]>,
) -> Vec<f64> {
    let heads = slot.keys.len();
    let mut out = Vec::new();
    for h in 0..heads {
        let q = &probe.queries[h];
        let d = q.len();
        let scale = 1.0 / (d as f64).sqrt();
        let mut scores = Vec::with_capacity(probe.len);
        for pos in 0..probe.len {
            let k = match replacement {
                Some(r) if pos == slot.target => &r[h].0,
                _ => &slot.keys[h][pos],
            };
            scores.push(math::dot(q, k) * scale);
        }
        let weights = math::softmax(&scores);
        let mut acc = vec![0.0; d];
        for (pos, &w) in weights.iter().enumerate() {
            let v = match replacement {
                Some(r) if pos == slot.target => &r[h].1,
                _ => &slot.values[h][pos],
            };
            for (a, &vi) in acc.iter_mut().zip(v) {
                *a += w * vi;
            }
        }
        out.extend_from_slice(&acc);
    }
    out
}

/// Label one token by brute force over the four storage classes.
///
/// For each class the token's key/value vectors are round-tripped
/// through the codec while everything else stays exact, and the mean
/// relative L2 error of the attention output over all probes is
/// recorded. The label is the smallest class whose distortion is at
/// most `tau`; if none qualifies the token stays at FP16. Per-class
/// quality is `max(0, 1 - distortion)`.
pub fn oracle_label(slots: &[OracleSlot<'_>], tau: f64) -> Result<(BitWidth, [f64; 4])> {
    if !(tau >= 0.0) {
        return Err(Error::invalid_input("tau must be a non-negative number"));
    }
    let n_probes: usize = slots.iter().map(|s| s.probes.len()).sum();
    if n_probes == 0 {
        return Err(Error::invalid_input("oracle requires at least one probe"));
    }
    for slot in slots {
        for probe in &slot.probes {
            if probe.len <= slot.target {
                return Err(Error::invalid_input(
                    "probe context must extend past the target position",
                ));
            }
        }
    }

    let mut distortion = [0.0f64; 4];
    for slot in slots {
        let heads = slot.keys.len();
        // Codec round trips of the target's key/value per head, per class.
        let mut replaced: Vec<Vec<(Vec<f64>, Vec<f64>)>> = Vec::with_capacity(4);
        for &b in &ALL_BIT_WIDTHS {
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let k = quant::dequantize(&quant::quantize(&slot.keys[h][slot.target], b)?);
                let v = quant::dequantize(&quant::quantize(&slot.values[h][slot.target], b)?);
                per_head.push((k, v));
            }
            replaced.push(per_head);
        }
        for probe in &slot.probes {
            let exact = probe_output(slot, probe, None);
            let norm = math::l2_norm(&exact).max(1e-12);
            for (slot_idx, per_head) in replaced.iter().enumerate() {
                let quantized = probe_output(slot, probe, Some(per_head));
                let err: f64 = exact
                    .iter()
                    .zip(&quantized)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                distortion[slot_idx] += err / norm / n_probes as f64;
            }
        }
    }

    let mut quality = [0.0f64; 4];
    for (q, &d) in quality.iter_mut().zip(&distortion) {
        *q = (1.0 - d).max(0.0);
    }
    let label = ALL_BIT_WIDTHS
        .iter()
        .find(|b| distortion[b.index()] <= tau)
        .copied()
        .unwrap_or(BitWidth::B16);
    Ok((label, quality))
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

/// Composite loss over a batch of standardized samples.
pub fn total_loss(
    batch: &[TrainingSample],
    params: &ControllerParams,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let (loss, _) = loss_terms(batch, &params.mlp, w, false)?;
    Ok(loss)
}

/// Exact analytic gradient of the composite loss with respect to all
/// six parameter tensors, with the loss breakdown it belongs to.
pub fn gradients(
    batch: &[TrainingSample],
    params: &ControllerParams,
    w: &LossWeights,
) -> Result<(LossBreakdown, MlpParams)> {
    let (loss, grads) = loss_terms(batch, &params.mlp, w, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn loss_terms(
    batch: &[TrainingSample],
    mlp: &MlpParams,
    w: &LossWeights,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<MlpParams>)> {
    if batch.is_empty() {
        return Err(Error::invalid_input("loss requires a non-empty batch"));
    }
    w.validate()?;

    let n = batch.len() as f64;
    let mut ce = 0.0;
    let mut lat = 0.0;
    let mut qual_exp = 0.0;
    let mut grads = want_grads.then(MlpParams::zeros);

    for sample in batch {
        let trace = controller::forward_trace(mlp, &sample.features)?;
        let probs = controller::class_probs(&trace.logits);
        let label = sample.label.index();

        // -ln p_label, computed from the stable log-softmax.
        let m = trace.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = trace
            .logits
            .iter()
            .map(|&z| (z - m).exp())
            .sum::<f64>()
            .ln();
        ce += -(trace.logits[label] - m - log_sum);

        let mean_cost: f64 = probs.iter().zip(&w.cost).map(|(p, c)| p * c).sum();
        let mean_quality: f64 = probs
            .iter()
            .zip(&w.quality_scores)
            .map(|(p, q)| p * q)
            .sum();
        lat += mean_cost;
        qual_exp += mean_quality;

        if let Some(grads) = grads.as_mut() {
            // d(total)/d(logit_j), already divided by the batch size.
            let mut g_o = [0.0f64; NUM_CLASSES];
            for j in 0..NUM_CLASSES {
                let ce_term = probs[j] - if j == label { 1.0 } else { 0.0 };
                let lat_term = probs[j] * (w.cost[j] - mean_cost);
                let qual_term = -probs[j] * (w.quality_scores[j] - mean_quality);
                g_o[j] = (w.alpha * ce_term + w.beta * lat_term + w.gamma * qual_term) / n;
            }
            backprop(mlp, &trace, &g_o, grads);
        }
    }

    let breakdown = LossBreakdown {
        cross_entropy: ce / n,
        latency: lat / n,
        quality: 1.0 - qual_exp / n,
        total: w.alpha * ce / n + w.beta * lat / n + w.gamma * (1.0 - qual_exp / n),
    };
    Ok((breakdown, grads))
}

fn backprop(
    mlp: &MlpParams,
    trace: &controller::ForwardTrace,
    g_o: &[f64; NUM_CLASSES],
    grads: &mut MlpParams,
) {
    grads.w3.add_outer(g_o, &trace.h2, 1.0);
    for (g, &d) in grads.b3.iter_mut().zip(g_o) {
        *g += d;
    }
    let mut g_z2 = mlp.w3.matvec_t(g_o);
    for (g, &z) in g_z2.iter_mut().zip(&trace.z2) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    grads.w2.add_outer(&g_z2, &trace.h1, 1.0);
    for (g, &d) in grads.b2.iter_mut().zip(&g_z2) {
        *g += d;
    }
    let mut g_z1 = mlp.w2.matvec_t(&g_z2);
    for (g, &z) in g_z1.iter_mut().zip(&trace.z1) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    grads.w1.add_outer(&g_z1, &trace.input, 1.0);
    for (g, &d) in grads.b1.iter_mut().zip(&g_z1) {
        *g += d;
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam optimizer state shaped like the controller parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: MlpParams,
    pub second_moment: MlpParams,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            first_moment: MlpParams::zeros(),
            second_moment: MlpParams::zeros(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(1e-3)
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step(params: &mut MlpParams, grads: &MlpParams, state: &mut AdamState) {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);

    let mut p_tensors = params.tensors_mut();
    let g_tensors = grads.tensors();
    let mut m_tensors = state.first_moment.tensors_mut();
    let mut v_tensors = state.second_moment.tensors_mut();
    for i in 0..p_tensors.len() {
        let (p, g) = (&mut p_tensors[i], g_tensors[i]);
        let (m, v) = (&mut m_tensors[i], &mut v_tensors[i]);
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset split and quality estimation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub train: Vec<TrainingSample>,
    pub validation: Vec<TrainingSample>,
    pub warnings: Vec<String>,
}

/// Per-class shuffled split: `floor(n·ratio)` samples to the training
/// side, remainder to validation, with at least one validation sample
/// per class of size >= 2. A single-sample class goes entirely to the
/// training side and is reported in `warnings`.
pub fn stratified_split(
    dataset: &[TrainingSample],
    ratio: f64,
    seed: u64,
) -> Result<SplitResult> {
    if dataset.is_empty() {
        return Err(Error::invalid_input("cannot split an empty dataset"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid_input("split ratio must lie in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut warnings = Vec::new();

    for &class in &ALL_BIT_WIDTHS {
        let mut indices: Vec<usize> = dataset
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            continue;
        }
        indices.shuffle(&mut rng);
        let n = indices.len();
        if n == 1 {
            warnings.push(format!(
                "class {class} has a single sample; validation set lacks it"
            ));
            train.push(dataset[indices[0]].clone());
            continue;
        }
        let n_train = ((n as f64 * ratio).floor() as usize).min(n - 1);
        for (slot, &i) in indices.iter().enumerate() {
            if slot < n_train {
                train.push(dataset[i].clone());
            } else {
                validation.push(dataset[i].clone());
            }
        }
    }
    Ok(SplitResult {
        train,
        validation,
        warnings,
    })
}

/// Mean sample quality per class over the training split. A class with
/// no samples takes the midpoint of its nearest populated neighbors in
/// bit-width order; an unpopulated FP16 class defaults to 1.
pub fn estimate_quality_scores(train: &[TrainingSample]) -> [f64; 4] {
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for s in train {
        sums[s.label.index()] += s.quality;
        counts[s.label.index()] += 1;
    }
    let mut q = [f64::NAN; 4];
    for k in 0..4 {
        if counts[k] > 0 {
            q[k] = sums[k] / counts[k] as f64;
        }
    }
    if q[3].is_nan() {
        q[3] = 1.0;
    }
    for k in 0..3 {
        if q[k].is_nan() {
            let lo = (0..k).rev().find(|&j| counts[j] > 0).map(|j| q[j]);
            let hi = (k + 1..4)
                .find(|&j| counts[j] > 0 || j == 3)
                .map(|j| q[j])
                .expect("class 16 always populated by default");
            q[k] = match lo {
                Some(lo) => (lo + hi) / 2.0,
                None => hi,
            };
        }
    }
    q
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub split_ratio: f64,
    /// Epochs without validation-loss improvement before stopping;
    /// 0 disables early stopping.
    pub patience: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub cost: [f64; 4],
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            seed: 0,
            split_ratio: 0.8,
            patience: 10,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            cost: DEFAULT_COST,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug)]
pub struct TrainResult {
    pub params: ControllerParams,
    pub history: Vec<EpochStats>,
    pub quality_scores: [f64; 4],
    pub warnings: Vec<String>,
}

/// Supervised training: stratified split, feature standardization from
/// the training split, quality-score estimation, then mini-batch Adam
/// on the composite loss. Deterministic given the seed.
pub fn train(dataset: &[TrainingSample], config: &TrainConfig) -> Result<TrainResult> {
    if dataset.is_empty() {
        return Err(Error::invalid_input("cannot train on an empty dataset"));
    }
    let split = stratified_split(dataset, config.split_ratio, config.seed)?;
    let stats = FeatureStats::fit(
        &split
            .train
            .iter()
            .map(|s| s.features)
            .collect::<Vec<_>>(),
    );
    let standardize = |samples: &[TrainingSample]| -> Vec<TrainingSample> {
        samples
            .iter()
            .map(|s| TrainingSample {
                features: stats.standardize(&s.features),
                ..s.clone()
            })
            .collect()
    };
    let train_set = standardize(&split.train);
    let val_set = standardize(&split.validation);

    let weights = LossWeights {
        alpha: config.alpha,
        beta: config.beta,
        gamma: config.gamma,
        cost: config.cost,
        quality_scores: estimate_quality_scores(&split.train),
    };
    weights.validate()?;

    let mut params = controller::init_params(config.seed);
    let mut adam = AdamState::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut history = Vec::new();
    let mut best_signal = f64::INFINITY;
    let mut stale_epochs = 0usize;

    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<TrainingSample> =
                chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads) = gradients(&batch, &params, &weights)?;
            adam_step(&mut params.mlp, &grads, &mut adam);
            epoch_loss += loss.total * batch.len() as f64;
        }
        let train_loss = epoch_loss / train_set.len() as f64;

        let (val_loss, val_accuracy) = if val_set.is_empty() {
            (None, None)
        } else {
            let loss = total_loss(&val_set, &params, &weights)?;
            let correct = val_set
                .iter()
                .filter(|s| {
                    let o = controller::forward(&params, &s.features).expect("finite");
                    controller::select_bitwidth(&controller::class_probs(&o)) == s.label
                })
                .count();
            (
                Some(loss.total),
                Some(correct as f64 / val_set.len() as f64),
            )
        };
        history.push(EpochStats {
            train_loss,
            val_loss,
            val_accuracy,
        });

        let signal = val_loss.unwrap_or(train_loss);
        if signal < best_signal - 1e-12 {
            best_signal = signal;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if config.patience > 0 && stale_epochs >= config.patience {
                break;
            }
        }
    }

    params.feature_stats = stats;
    Ok(TrainResult {
        params,
        history,
        quality_scores: weights.quality_scores,
        warnings: split.warnings,
    })
}

/// Mean expected latency `sum_k p_k c_k` of the trained policy over a
/// set of raw-feature samples.
pub fn expected_latency(
    params: &ControllerParams,
    samples: &[TrainingSample],
    cost: &[f64; 4],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid_input("expected latency needs samples"));
    }
    let mut acc = 0.0;
    for s in samples {
        let z = params.feature_stats.standardize(&s.features);
        let probs = controller::class_probs(&controller::forward(params, &z)?);
        acc += probs.iter().zip(cost).map(|(p, c)| p * c).sum::<f64>();
    }
    Ok(acc / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// Dataset file format (JSONL, strict)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    features: [f64; 4],
    label: u32,
    latency: f64,
    quality: f64,
}

/// Write samples as JSON Lines, one record per token.
pub fn write_dataset(samples: &[TrainingSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        let record = SampleRecord {
            features: s.features.as_array(),
            label: s.label.bits(),
            latency: s.latency,
            quality: s.quality,
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse a JSONL dataset. Unknown keys, bad labels, and out-of-range
/// fields are rejected with the offending line number.
pub fn read_dataset(path: &Path) -> Result<Vec<TrainingSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::Dataset {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        let label = BitWidth::from_bits(record.label).map_err(|_| Error::Dataset {
            line: idx + 1,
            msg: format!("label {} is not one of 2, 4, 8, 16", record.label),
        })?;
        if record.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset {
                line: idx + 1,
                msg: "non-finite feature".into(),
            });
        }
        if !(0.0..=1.0).contains(&record.quality) {
            return Err(Error::Dataset {
                line: idx + 1,
                msg: format!("quality {} outside [0, 1]", record.quality),
            });
        }
        if record.latency < 0.0 || !record.latency.is_finite() {
            return Err(Error::Dataset {
                line: idx + 1,
                msg: format!("latency {} must be finite and >= 0", record.latency),
            });
        }
        samples.push(TrainingSample {
            features: SaliencyFeatures::from_array(record.features),
            label,
            latency: record.latency,
            quality: record.quality,
        });
    }
    Ok(samples)
}
