//! Command-line front end: codec demo, oracle dataset generation,
//! controller training, and benchmark runs.

use clap::{Parser, Subcommand};
use kvbits::bench::{self, BenchConfig, ReportFormat};
use kvbits::controller::{load_controller, save_controller};
use kvbits::error::Error;
use kvbits::quant::{self, ALL_BIT_WIDTHS};
use kvbits::trainer;
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kvbits", version, about = "Adaptive KV-cache quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print codec round trips for a seeded random vector.
    QuantizeDemo {
        /// Vector length.
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Label tokens from exact reference runs and write a JSONL dataset.
    LabelOracle {
        /// Benchmark configuration file (TOML).
        #[arg(long)]
        model_config: PathBuf,
        /// Output dataset path (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Distortion threshold; overrides the config.
        #[arg(long)]
        tau: Option<f64>,
        /// Corpus seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the precision controller on a labeled dataset.
    TrainController {
        /// Input dataset (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Output controller artifact.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
    /// Compare precision policies over the benchmark suite.
    RunBench {
        /// Benchmark configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Report output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
        /// Controller artifact for the adaptive policy; overrides the
        /// config's controller path.
        #[arg(long)]
        controller: Option<PathBuf>,
        /// Measure non-normative wall-clock time per token.
        #[arg(long, default_value_t = false)]
        wall_clock: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::ControllerFormat(_) | Error::Dataset { .. } => {
                    ExitCode::from(1)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> kvbits::Result<()> {
    match cli.command {
        Command::QuantizeDemo { dim, seed } => quantize_demo(dim, seed),
        Command::LabelOracle {
            model_config,
            out,
            tau,
            seed,
        } => {
            let mut config = BenchConfig::load(&model_config)?;
            if let Some(tau) = tau {
                config.oracle.tau = tau;
            }
            if let Some(seed) = seed {
                config.corpus.seed = seed;
            }
            config.validate()?;
            let dataset = bench::build_oracle_dataset(&config)?;
            trainer::write_dataset(&dataset, &out)?;
            let mut per_class = [0usize; 4];
            for s in &dataset {
                per_class[s.label.index()] += 1;
            }
            println!(
                "wrote {} samples to {} (tau {}): class counts 2/4/8/16 = {:?}",
                dataset.len(),
                out.display(),
                config.oracle.tau,
                per_class
            );
            Ok(())
        }
        Command::TrainController {
            data,
            out,
            alpha,
            beta,
            gamma,
            epochs,
            batch,
            seed,
        } => {
            let dataset = trainer::read_dataset(&data)?;
            let config = trainer::TrainConfig {
                epochs,
                batch_size: batch,
                seed,
                alpha,
                beta,
                gamma,
                ..trainer::TrainConfig::default()
            };
            let result = trainer::train(&dataset, &config)?;
            for warning in &result.warnings {
                eprintln!("warning: {warning}");
            }
            save_controller(&result.params, &out)?;
            let last = result.history.last().expect("at least one epoch");
            println!(
                "trained on {} samples for {} epochs; final train loss {:.6}, \
                 validation accuracy {}",
                dataset.len(),
                result.history.len(),
                last.train_loss,
                last.val_accuracy
                    .map(|a| format!("{:.4}", a))
                    .unwrap_or_else(|| "n/a".into()),
            );
            println!("controller written to {}", out.display());
            Ok(())
        }
        Command::RunBench {
            config,
            out,
            format,
            controller,
            wall_clock,
        } => {
            let config = BenchConfig::load(&config)?;
            let format: ReportFormat = format.parse()?;
            let controller_path = controller.or_else(|| config.controller.path.clone());
            let params = match (&controller_path, config.policies.adaptive) {
                (Some(path), true) => Some(load_controller(path)?),
                (None, true) => {
                    return Err(Error::config(
                        "adaptive policy enabled but no controller path given",
                    ))
                }
                _ => None,
            };
            let output = bench::run_benchmark(&config, params, wall_clock)?;
            for r in &output.reports {
                println!(
                    "{:<10} agreement {:.4}  distortion {:.6}  E[b] {:>6.3}  \
                     latency {:>8.2}  storage {} bits",
                    r.policy,
                    r.token_agreement,
                    r.mean_distortion,
                    r.expected_bits,
                    r.latency_proxy,
                    r.total_storage_bits
                );
            }
            for p in &output.pareto {
                println!(
                    "pareto {} vs {}: {} (latency margin {:.2}, agreement margin {:.4}, eps {})",
                    p.candidate,
                    p.baseline,
                    if p.dominates { "dominates" } else { "no" },
                    p.latency_margin,
                    p.agreement_margin,
                    p.epsilon
                );
            }
            bench::emit_report(&output, &out, format)?;
            println!("report written to {}", out.display());
            Ok(())
        }
    }
}

fn quantize_demo(dim: usize, seed: u64) -> kvbits::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..dim.max(1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    println!("input ({dim} elements, seed {seed}):");
    println!("  {}", fmt_vec(&x));
    for &b in &ALL_BIT_WIDTHS {
        let q = quant::quantize(&x, b)?;
        let y = quant::dequantize(&q);
        let max_err = x
            .iter()
            .zip(&y)
            .map(|(a, c)| (a - c).abs())
            .fold(0.0f64, f64::max);
        println!(
            "{:>2}-bit: storage {:>4} bits, scale {:.6}, zero {:.6}, max |error| {:.3e}",
            b.bits(),
            quant::storage_bits(&q),
            q.scale,
            q.zero_point,
            max_err
        );
        println!("  {}", fmt_vec(&y));
    }
    Ok(())
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:+.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}
