//! Benchmark harness: theory quantities over decode traces, policy
//! comparison runs with machine-readable reports, the synthetic prompt
//! corpus, and the oracle dataset builder behind the CLI.

use crate::controller::ControllerParams;
use crate::engine::{
    self, DecodeTrace, PrecisionPolicy, TinyModelConfig,
};
use crate::error::{Error, Result};
use crate::quant::BitWidth;
use crate::saliency::TokenCounter;
use crate::trainer::{self, OracleProbe, OracleSlot, TrainingSample, DEFAULT_COST};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Theory quantities
// ---------------------------------------------------------------------------

/// Ideal variable-length code length for a symbol of probability `p`:
/// `ceil(-log2 p)` bits.
pub fn huffman_length(p: f64) -> Result<u32> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid_input(format!(
            "symbol probability {p} must lie in (0, 1]"
        )));
    }
    Ok((-p.log2()).ceil().max(0.0) as u32)
}

/// Empirical expected bit-width: mean assigned width over the trace.
pub fn expected_bits(trace: &DecodeTrace) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::invalid_input("expected_bits needs a non-empty trace"));
    }
    let sum: u64 = trace.records.iter().map(|r| r.bits.bits() as u64).sum();
    Ok(sum as f64 / trace.len() as f64)
}

/// Latency-proxy saving versus storing everything at FP16: the sum over
/// tokens assigned a width below 16 of `cost[16] - cost[width]`.
pub fn latency_savings(trace: &DecodeTrace, cost: &[f64; 4]) -> f64 {
    trace
        .records
        .iter()
        .filter(|r| r.bits != BitWidth::B16)
        .map(|r| cost[3] - cost[r.bits.index()])
        .sum()
}

/// Total latency proxy of a trace: the sum of per-token class costs.
pub fn latency_proxy(trace: &DecodeTrace, cost: &[f64; 4]) -> f64 {
    trace
        .records
        .iter()
        .map(|r| cost[r.bits.index()])
        .sum()
}

/// Token counter over a trace's input stream.
pub fn counter_from_trace(trace: &DecodeTrace) -> TokenCounter {
    let mut counter = TokenCounter::new();
    for r in &trace.records {
        counter.observe(r.token);
    }
    counter
}

/// Waste estimate `W = E[b] - H(X)`, where `H(X)` is the empirical
/// base-2 Shannon entropy of the token-frequency distribution. The
/// entropy term is an estimate of the stream's information content,
/// not a per-token compressibility bound.
pub fn waste_estimate(trace: &DecodeTrace, counter: &TokenCounter) -> Result<f64> {
    let eb = expected_bits(trace)?;
    let total = counter.total() as f64;
    let mut entropy = 0.0;
    for (_, count) in counter.iter() {
        let p = count as f64 / total;
        entropy -= p * p.log2();
    }
    Ok(eb - entropy)
}

// ---------------------------------------------------------------------------
// Reports and Pareto dominance
// ---------------------------------------------------------------------------

/// Identifies which runs are comparable: same model, same corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub model: TinyModelConfig,
    pub corpus: CorpusConfig,
}

/// Aggregated metrics of one policy over the benchmark suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub policy: String,
    /// Fraction of generation decisions matching the exact reference.
    pub token_agreement: f64,
    /// Mean per-step relative L2 error of the final-layer attention
    /// output versus the exact reference.
    pub mean_distortion: f64,
    /// Mean assigned bit-width over all processed tokens.
    pub expected_bits: f64,
    pub total_storage_bits: u64,
    /// Sum of per-token class costs.
    pub latency_proxy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_clock_ms_per_token: Option<f64>,
    pub config: ConfigEcho,
    pub seed: u64,
}

/// Outcome of one dominance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRecord {
    pub candidate: String,
    pub baseline: String,
    pub dominates: bool,
    /// `baseline.latency_proxy - candidate.latency_proxy` (> 0 required).
    pub latency_margin: f64,
    /// `|baseline.token_agreement - candidate.token_agreement|`
    /// (< epsilon required).
    pub agreement_margin: f64,
    pub epsilon: f64,
}

/// `candidate` Pareto-dominates `baseline` iff its latency proxy is
/// strictly lower and the agreement deviation stays strictly below
/// `epsilon`. Reports from different model/corpus configurations do
/// not compare.
pub fn pareto_check(
    candidate: &BenchReport,
    baseline: &BenchReport,
    epsilon: f64,
) -> Result<ParetoRecord> {
    if candidate.config != baseline.config || candidate.seed != baseline.seed {
        return Err(Error::InvalidComparison(format!(
            "reports for '{}' and '{}' come from different runs",
            candidate.policy, baseline.policy
        )));
    }
    let latency_margin = baseline.latency_proxy - candidate.latency_proxy;
    let agreement_margin = (baseline.token_agreement - candidate.token_agreement).abs();
    Ok(ParetoRecord {
        candidate: candidate.policy.clone(),
        baseline: baseline.policy.clone(),
        dominates: latency_margin > 0.0 && agreement_margin < epsilon,
        latency_margin,
        agreement_margin,
        epsilon,
    })
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Synthetic prompt corpus: a seeded mixture of a Zipf unigram source
/// and a repeated per-prompt motif, so entropy and rarity features vary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub prompts: usize,
    pub prompt_len: usize,
    pub steps: usize,
    pub zipf_exponent: f64,
    pub motif_len: usize,
    pub motif_prob: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            prompts: 20,
            prompt_len: 32,
            steps: 200,
            zipf_exponent: 1.1,
            motif_len: 8,
            motif_prob: 0.35,
            seed: 42,
        }
    }
}

impl Eq for CorpusConfig {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoliciesConfig {
    pub full16: bool,
    /// Fixed widths to benchmark, e.g. [2, 4, 8].
    pub static_bits: Vec<u32>,
    /// Entropy thresholds of the rule baseline; absent disables it.
    pub rule_thresholds: Option<[f64; 3]>,
    /// Benchmark the trained controller (requires a controller file).
    pub adaptive: bool,
}

impl Default for PoliciesConfig {
    fn default() -> Self {
        PoliciesConfig {
            full16: true,
            static_bits: vec![2, 4, 8],
            rule_thresholds: Some([4.11, 4.13, 4.15]),
            adaptive: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub tau: f64,
    /// Probe queries per labeled token.
    pub probes: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            tau: 0.05,
            probes: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch: usize,
    pub ratio: f64,
    pub patience: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            epochs: 100,
            batch: 64,
            ratio: 0.8,
            patience: 10,
            learning_rate: 1e-3,
            seed: 1234,
        }
    }
}

impl TrainingConfig {
    pub fn to_train_config(&self, cost: [f64; 4]) -> trainer::TrainConfig {
        trainer::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            seed: self.seed,
            split_ratio: self.ratio,
            patience: self.patience,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            cost,
            learning_rate: self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParetoConfig {
    pub epsilon: f64,
}

impl Default for ParetoConfig {
    fn default() -> Self {
        ParetoConfig { epsilon: 0.05 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerRef {
    pub path: Option<PathBuf>,
}

/// Top-level benchmark configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub schema_version: u32,
    pub model: TinyModelConfig,
    pub corpus: CorpusConfig,
    pub policies: PoliciesConfig,
    /// Per-class latency costs, strictly increasing.
    pub costs: [f64; 4],
    pub oracle: OracleConfig,
    pub training: TrainingConfig,
    pub pareto: ParetoConfig,
    pub controller: ControllerRef,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            schema_version: 1,
            model: TinyModelConfig::default(),
            corpus: CorpusConfig::default(),
            policies: PoliciesConfig::default(),
            costs: DEFAULT_COST,
            oracle: OracleConfig::default(),
            training: TrainingConfig::default(),
            pareto: ParetoConfig::default(),
            controller: ControllerRef::default(),
        }
    }
}

impl BenchConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: BenchConfig =
            toml::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::config(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        self.model.validate()?;
        if self.corpus.prompts == 0 || self.corpus.prompt_len == 0 {
            return Err(Error::config("corpus needs prompts and prompt_len >= 1"));
        }
        if !(0.0..=1.0).contains(&self.corpus.motif_prob) {
            return Err(Error::config("motif_prob must lie in [0, 1]"));
        }
        if self.corpus.zipf_exponent <= 0.0 {
            return Err(Error::config("zipf_exponent must be positive"));
        }
        if !self.costs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("costs must be strictly increasing"));
        }
        if let Some(t) = self.policies.rule_thresholds {
            if !(t[0] < t[1] && t[1] < t[2]) {
                return Err(Error::config(
                    "rule thresholds must be strictly increasing",
                ));
            }
        }
        for &b in &self.policies.static_bits {
            BitWidth::from_bits(b).map_err(|e| Error::config(e.to_string()))?;
        }
        if self.oracle.tau < 0.0 {
            return Err(Error::config("oracle tau must be >= 0"));
        }
        if self.oracle.probes == 0 {
            return Err(Error::config("oracle needs at least one probe"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

/// Deterministically generate the prompt corpus for a vocabulary size.
pub fn generate_prompts(corpus: &CorpusConfig, vocab: usize) -> Vec<Vec<u32>> {
    (0..corpus.prompts)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                corpus
                    .seed
                    .wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            );
            let zipf = rand_distr::Zipf::new(vocab as u64, corpus.zipf_exponent)
                .expect("validated corpus parameters");
            let motif: Vec<u32> = (0..corpus.motif_len.max(1))
                .map(|_| rand::Rng::gen_range(&mut rng, 0..vocab as u32))
                .collect();
            let mut motif_cursor = 0usize;
            (0..corpus.prompt_len)
                .map(|_| {
                    if rand::Rng::gen_bool(&mut rng, corpus.motif_prob) {
                        let t = motif[motif_cursor % motif.len()];
                        motif_cursor += 1;
                        t
                    } else {
                        let rank: f64 = zipf.sample(&mut rng);
                        rank as u32 - 1
                    }
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Benchmark runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchOutput {
    pub schema_version: u32,
    pub reports: Vec<BenchReport>,
    pub pareto: Vec<ParetoRecord>,
}

fn build_policies(
    config: &BenchConfig,
    controller: Option<ControllerParams>,
) -> Result<Vec<PrecisionPolicy>> {
    let mut policies = Vec::new();
    if config.policies.full16 {
        policies.push(PrecisionPolicy::Full16);
    }
    for &bits in &config.policies.static_bits {
        policies.push(PrecisionPolicy::Static(BitWidth::from_bits(bits)?));
    }
    if let Some(thresholds) = config.policies.rule_thresholds {
        let rule = PrecisionPolicy::Rule { thresholds };
        rule.validate()?;
        policies.push(rule);
    }
    if config.policies.adaptive {
        let params = controller.ok_or_else(|| {
            Error::config("adaptive policy requested but no controller supplied")
        })?;
        policies.push(PrecisionPolicy::Adaptive(params));
    }
    if policies.is_empty() {
        return Err(Error::config("no policies selected"));
    }
    Ok(policies)
}

/// Run every configured policy against the exact reference over the
/// full prompt corpus. Prompts are fixed by the corpus seed, so every
/// policy sees identical inputs; per-policy work fans out across a
/// thread pool and is reduced in a fixed order.
pub fn run_benchmark(
    config: &BenchConfig,
    controller: Option<ControllerParams>,
    wall_clock: bool,
) -> Result<BenchOutput> {
    config.validate()?;
    let model = engine::build_model(&config.model)?;
    let prompts = generate_prompts(&config.corpus, config.model.vocab);
    let policies = build_policies(config, controller)?;
    let echo = ConfigEcho {
        model: config.model,
        corpus: config.corpus,
    };

    let mut reports = Vec::with_capacity(policies.len());
    for policy in &policies {
        let runs: Vec<(engine::DualRunResult, Option<f64>)> = prompts
            .par_iter()
            .map(|prompt| {
                let dual = engine::dual_generate(
                    &model,
                    prompt,
                    config.corpus.steps,
                    policy,
                )?;
                let elapsed = if wall_clock {
                    let start = std::time::Instant::now();
                    engine::generate(&model, prompt, config.corpus.steps, policy)?;
                    Some(start.elapsed().as_secs_f64() * 1e3)
                } else {
                    None
                };
                Ok((dual, elapsed))
            })
            .collect::<Result<_>>()?;

        let mut agreement = 0.0;
        let mut distortion_sum = 0.0;
        let mut distortion_count = 0usize;
        let mut bits_sum = 0u64;
        let mut token_count = 0usize;
        let mut storage = 0u64;
        let mut latency = 0.0;
        let mut wall_ms = 0.0;
        for (dual, elapsed) in &runs {
            agreement += dual.token_agreement / runs.len() as f64;
            distortion_sum += dual.distortions.iter().sum::<f64>();
            distortion_count += dual.distortions.len();
            bits_sum += dual
                .policy_trace
                .records
                .iter()
                .map(|r| r.bits.bits() as u64)
                .sum::<u64>();
            token_count += dual.policy_trace.len();
            storage += dual.policy_trace.total_storage_bits();
            latency += latency_proxy(&dual.policy_trace, &config.costs);
            if let Some(ms) = elapsed {
                wall_ms += ms;
            }
        }

        reports.push(BenchReport {
            policy: policy.name(),
            token_agreement: agreement,
            mean_distortion: distortion_sum / distortion_count.max(1) as f64,
            expected_bits: bits_sum as f64 / token_count.max(1) as f64,
            total_storage_bits: storage,
            latency_proxy: latency,
            wall_clock_ms_per_token: wall_clock.then(|| wall_ms / token_count.max(1) as f64),
            config: echo.clone(),
            seed: config.corpus.seed,
        });
    }

    let mut pareto = Vec::new();
    let full16 = reports.iter().find(|r| r.policy == "full16").cloned();
    for report in &reports {
        if let Some(baseline) = &full16 {
            if report.policy != baseline.policy {
                pareto.push(pareto_check(report, baseline, config.pareto.epsilon)?);
            }
        }
    }
    if let Some(adaptive) = reports.iter().find(|r| r.policy == "adaptive").cloned() {
        for report in &reports {
            if report.policy.starts_with("static") {
                pareto.push(pareto_check(&adaptive, report, config.pareto.epsilon)?);
            }
        }
    }

    Ok(BenchOutput {
        schema_version: 1,
        reports,
        pareto,
    })
}

// ---------------------------------------------------------------------------
// Oracle dataset
// ---------------------------------------------------------------------------

/// Build the token-level training dataset from exact reference runs
/// over the corpus: per-token raw features paired with the brute-force
/// oracle label, the class latency proxy, and the quality at the label.
/// The final token of each sequence has no future probes and is skipped.
pub fn build_oracle_dataset(config: &BenchConfig) -> Result<Vec<TrainingSample>> {
    config.validate()?;
    let model = engine::build_model(&config.model)?;
    let prompts = generate_prompts(&config.corpus, config.model.vocab);

    let per_prompt: Vec<Vec<TrainingSample>> = prompts
        .par_iter()
        .map(|prompt| {
            let run = engine::generate_recorded(&model, prompt, config.corpus.steps)?;
            let total = run.trace.len();
            let mut samples = Vec::with_capacity(total.saturating_sub(1));
            for target in 0..total.saturating_sub(1) {
                let probe_steps = spread_probes(target + 1, total - 1, config.oracle.probes);
                let slots: Vec<OracleSlot<'_>> = (0..config.model.layers)
                    .map(|l| OracleSlot {
                        keys: &run.keys[l],
                        values: &run.values[l],
                        target,
                        probes: probe_steps
                            .iter()
                            .map(|&j| OracleProbe {
                                queries: run.queries[j][l].clone(),
                                len: j + 1,
                            })
                            .collect(),
                    })
                    .collect();
                let (label, quality) = trainer::oracle_label(&slots, config.oracle.tau)?;
                samples.push(TrainingSample {
                    features: run.trace.records[target].features,
                    label,
                    latency: config.costs[label.index()],
                    quality: quality[label.index()],
                });
            }
            Ok(samples)
        })
        .collect::<Result<_>>()?;

    Ok(per_prompt.into_iter().flatten().collect())
}

/// Up to `want` probe steps spread evenly over `[lo, hi]`.
fn spread_probes(lo: usize, hi: usize, want: usize) -> Vec<usize> {
    if lo > hi || want == 0 {
        return Vec::new();
    }
    let available = hi - lo + 1;
    if available <= want {
        return (lo..=hi).collect();
    }
    let mut steps: Vec<usize> = (0..want)
        .map(|k| lo + k * (available - 1) / (want - 1).max(1))
        .collect();
    steps.dedup();
    steps
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

pub const CSV_HEADER: &str = "policy,token_agreement,mean_distortion,expected_bits,\
total_storage_bits,latency_proxy,wall_clock_ms_per_token,seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::config(format!(
                "unknown report format '{other}'; expected json or csv"
            ))),
        }
    }
}

/// Write the benchmark output. JSON round-trips losslessly; CSV emits
/// one row per policy in the documented column order (the Pareto
/// section is JSON-only).
pub fn emit_report(output: &BenchOutput, path: &Path, format: ReportFormat) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut file, output)
                .map_err(|e| Error::io(path, e.into()))?;
            file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        ReportFormat::Csv => {
            let mut text = String::from(CSV_HEADER);
            text.push('\n');
            for r in &output.reports {
                let wall = r
                    .wall_clock_ms_per_token
                    .map(|v| v.to_string())
                    .unwrap_or_default();
                text.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.policy,
                    r.token_agreement,
                    r.mean_distortion,
                    r.expected_bits,
                    r.total_storage_bits,
                    r.latency_proxy,
                    wall,
                    r.seed
                ));
            }
            file.write_all(text.as_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

pub fn parse_report_json(path: &Path) -> Result<BenchOutput> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{build_model, generate, StepRecord};
    use crate::saliency::SaliencyFeatures;

    fn trace_with_bits(bits: &[BitWidth]) -> DecodeTrace {
        trace_with(bits, &vec![0u32; bits.len()])
    }

    fn trace_with(bits: &[BitWidth], tokens: &[u32]) -> DecodeTrace {
        let records = bits
            .iter()
            .zip(tokens)
            .map(|(&b, &t)| StepRecord {
                token: t,
                bits: b,
                features: SaliencyFeatures::from_array([0.0; 4]),
                storage_bits: 0,
                next_token: 0,
            })
            .collect();
        DecodeTrace {
            records,
            prompt_len: bits.len(),
        }
    }

    fn dummy_report(policy: &str, agreement: f64, latency: f64) -> BenchReport {
        BenchReport {
            policy: policy.into(),
            token_agreement: agreement,
            mean_distortion: 0.0,
            expected_bits: 8.0,
            total_storage_bits: 0,
            latency_proxy: latency,
            wall_clock_ms_per_token: None,
            config: ConfigEcho {
                model: TinyModelConfig::default(),
                corpus: CorpusConfig::default(),
            },
            seed: 42,
        }
    }

    #[test]
    fn huffman_length_examples() {
        assert_eq!(huffman_length(0.25).unwrap(), 2);
        assert_eq!(huffman_length(1.0).unwrap(), 0);
        assert_eq!(huffman_length(0.3).unwrap(), 2);
        assert!(huffman_length(0.0).is_err());
        assert!(huffman_length(1.5).is_err());
    }

    #[test]
    fn huffman_length_dominates_ideal_length() {
        for i in 1..200 {
            let p = i as f64 / 200.0;
            let l = huffman_length(p).unwrap() as f64;
            let ideal = -p.log2();
            assert!(l >= ideal - 1e-12);
            let pow = 0.5f64.powi(i % 20);
            let l = huffman_length(pow).unwrap() as f64;
            assert!((l - (-pow.log2())).abs() < 1e-12, "equality at powers of 1/2");
        }
    }

    #[test]
    fn expected_bits_examples() {
        let t = trace_with_bits(&[BitWidth::B16; 5]);
        assert_eq!(expected_bits(&t).unwrap(), 16.0);
        let t = trace_with_bits(&[BitWidth::B4, BitWidth::B16, BitWidth::B4, BitWidth::B16]);
        assert_eq!(expected_bits(&t).unwrap(), 10.0);
        let t = trace_with_bits(&[BitWidth::B2; 3]);
        assert_eq!(expected_bits(&t).unwrap(), 2.0);
        assert!(expected_bits(&trace_with_bits(&[])).is_err());
    }

    #[test]
    fn latency_savings_examples() {
        let cost = DEFAULT_COST;
        let t = trace_with_bits(&[BitWidth::B16; 7]);
        assert_eq!(latency_savings(&t, &cost), 0.0);
        let t = trace_with_bits(&[BitWidth::B4; 10]);
        assert!((latency_savings(&t, &cost) - 7.5).abs() < 1e-12);
        let t = trace_with_bits(&[BitWidth::B8, BitWidth::B16]);
        assert!(latency_savings(&t, &cost) > 0.0);
    }

    #[test]
    fn latency_savings_identity_with_proxy() {
        let cost = DEFAULT_COST;
        let t = trace_with_bits(&[
            BitWidth::B2,
            BitWidth::B16,
            BitWidth::B8,
            BitWidth::B4,
            BitWidth::B16,
        ]);
        let identity = t.len() as f64 * cost[3] - latency_proxy(&t, &cost);
        assert!((latency_savings(&t, &cost) - identity).abs() < 1e-12);
    }

    #[test]
    fn waste_estimate_examples() {
        // Single repeated token at 2 bits: W = 2 - 0.
        let t = trace_with(&[BitWidth::B2; 8], &[3; 8]);
        let c = counter_from_trace(&t);
        assert!((waste_estimate(&t, &c).unwrap() - 2.0).abs() < 1e-12);

        // Uniform stream over 4 tokens at 16 bits: W = 16 - 2.
        let tokens: Vec<u32> = (0..16).map(|i| i % 4).collect();
        let t = trace_with(&[BitWidth::B16; 16], &tokens);
        let c = counter_from_trace(&t);
        assert!((waste_estimate(&t, &c).unwrap() - 14.0).abs() < 1e-12);

        // Same stream at 2 bits: W = 0.
        let t = trace_with(&[BitWidth::B2; 16], &tokens);
        let c = counter_from_trace(&t);
        assert!(waste_estimate(&t, &c).unwrap().abs() < 1e-12);
    }

    #[test]
    fn pareto_check_boundaries() {
        let a = dummy_report("adaptive", 0.98, 100.0);
        // Identical latency: not strictly lower, no dominance.
        let same = dummy_report("full16", 0.98, 100.0);
        assert!(!pareto_check(&a, &same, 0.01).unwrap().dominates);

        let slower = dummy_report("full16", 0.98, 111.0);
        assert!(pareto_check(&a, &slower, 0.01).unwrap().dominates);

        // Agreement deviation exactly epsilon: strict inequality fails.
        let b = dummy_report("adaptive", 0.97, 100.0);
        let baseline = dummy_report("full16", 0.98, 111.0);
        let outcome = pareto_check(&b, &baseline, 0.01).unwrap();
        assert!((outcome.agreement_margin - 0.01).abs() < 1e-12);
        assert!(!outcome.dominates);
    }

    #[test]
    fn pareto_check_rejects_mismatched_runs() {
        let a = dummy_report("adaptive", 0.9, 10.0);
        let mut b = dummy_report("full16", 0.9, 12.0);
        b.seed = 43;
        assert!(pareto_check(&a, &b, 0.05).is_err());
        let mut c = dummy_report("full16", 0.9, 12.0);
        c.config.model.seed = 5;
        assert!(pareto_check(&a, &c, 0.05).is_err());
    }

    #[test]
    fn pareto_dominance_is_antisymmetric_in_latency() {
        let a = dummy_report("static4", 0.98, 90.0);
        let b = dummy_report("full16", 0.99, 100.0);
        let ab = pareto_check(&a, &b, 0.5).unwrap();
        let ba = pareto_check(&b, &a, 0.5).unwrap();
        assert!(!(ab.dominates && ba.dominates));
    }

    #[test]
    fn corpus_is_deterministic_and_in_vocab() {
        let corpus = CorpusConfig::default();
        let a = generate_prompts(&corpus, 64);
        let b = generate_prompts(&corpus, 64);
        assert_eq!(a, b);
        assert_eq!(a.len(), corpus.prompts);
        for prompt in &a {
            assert_eq!(prompt.len(), corpus.prompt_len);
            assert!(prompt.iter().all(|&t| (t as usize) < 64));
        }
        // Motifs make repeats: some token must appear more than once.
        assert!(a
            .iter()
            .any(|p| { p.iter().any(|t| p.iter().filter(|&&x| x == *t).count() > 2) }));
    }

    #[test]
    fn spread_probes_covers_range() {
        assert_eq!(spread_probes(3, 5, 8), vec![3, 4, 5]);
        assert_eq!(spread_probes(2, 10, 3), vec![2, 6, 10]);
        assert_eq!(spread_probes(5, 4, 3), Vec::<usize>::new());
        assert_eq!(spread_probes(4, 4, 1), vec![4]);
    }

    #[test]
    fn small_benchmark_runs_and_orders_static_policies() {
        let config = BenchConfig {
            corpus: CorpusConfig {
                prompts: 4,
                prompt_len: 8,
                steps: 24,
                ..CorpusConfig::default()
            },
            ..BenchConfig::default()
        };
        let output = run_benchmark(&config, None, false).unwrap();
        let find = |name: &str| {
            output
                .reports
                .iter()
                .find(|r| r.policy == name)
                .unwrap_or_else(|| panic!("missing policy {name}"))
        };
        let full = find("full16");
        assert!(full.token_agreement >= 0.99);
        assert_eq!(full.expected_bits, 16.0);
        let d2 = find("static2").mean_distortion;
        let d4 = find("static4").mean_distortion;
        let d8 = find("static8").mean_distortion;
        let d16 = full.mean_distortion;
        assert!(d2 >= d4 && d4 >= d8 && d8 >= d16, "{d2} {d4} {d8} {d16}");
        // full16 is compared against every other policy.
        assert!(output.pareto.iter().all(|p| p.baseline == "full16"));
    }

    #[test]
    fn benchmark_requires_controller_for_adaptive() {
        let config = BenchConfig {
            policies: PoliciesConfig {
                adaptive: true,
                ..PoliciesConfig::default()
            },
            corpus: CorpusConfig {
                prompts: 1,
                prompt_len: 4,
                steps: 2,
                ..CorpusConfig::default()
            },
            ..BenchConfig::default()
        };
        match run_benchmark(&config, None, false) {
            Err(Error::Config(_)) => {}
            other => panic!("expected configuration error, got {other:?}"),
        }
    }

    #[test]
    fn report_json_roundtrip_and_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let config = BenchConfig {
            corpus: CorpusConfig {
                prompts: 2,
                prompt_len: 6,
                steps: 8,
                ..CorpusConfig::default()
            },
            policies: PoliciesConfig {
                full16: true,
                static_bits: vec![4],
                rule_thresholds: None,
                adaptive: false,
            },
            ..BenchConfig::default()
        };
        let output = run_benchmark(&config, None, false).unwrap();

        let json_path = dir.path().join("report.json");
        emit_report(&output, &json_path, ReportFormat::Json).unwrap();
        let parsed = parse_report_json(&json_path).unwrap();
        assert_eq!(output.reports, parsed.reports);
        assert_eq!(output.pareto, parsed.pareto);

        let csv_path = dir.path().join("report.csv");
        emit_report(&output, &csv_path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.count(), output.reports.len());

        // Empty output still produces a valid file.
        let empty = BenchOutput {
            schema_version: 1,
            reports: vec![],
            pareto: vec![],
        };
        emit_report(&empty, &csv_path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.trim_end(), CSV_HEADER);
        emit_report(&empty, &json_path, ReportFormat::Json).unwrap();
        assert!(parse_report_json(&json_path).unwrap().reports.is_empty());
    }

    #[test]
    fn oracle_dataset_is_deterministic_with_sane_fields() {
        let config = BenchConfig {
            corpus: CorpusConfig {
                prompts: 2,
                prompt_len: 6,
                steps: 10,
                ..CorpusConfig::default()
            },
            ..BenchConfig::default()
        };
        let a = build_oracle_dataset(&config).unwrap();
        let b = build_oracle_dataset(&config).unwrap();
        assert_eq!(a, b);
        // One sample per token except the final token of each sequence.
        assert_eq!(a.len(), 2 * (6 + 10 - 1));
        for s in &a {
            assert!((0.0..=1.0).contains(&s.quality));
            assert!(s.latency > 0.0);
            assert!(s.features.is_finite());
        }
    }

    #[test]
    fn expected_bits_on_real_traces_stays_in_range() {
        let model = build_model(&TinyModelConfig::default()).unwrap();
        for policy in [
            PrecisionPolicy::Full16,
            PrecisionPolicy::Static(BitWidth::B2),
            PrecisionPolicy::Rule {
                thresholds: [4.11, 4.13, 4.15],
            },
        ] {
            let trace = generate(&model, &[1, 2, 3], 20, &policy).unwrap();
            let eb = expected_bits(&trace).unwrap();
            assert!((2.0..=16.0).contains(&eb));
        }
    }
}
