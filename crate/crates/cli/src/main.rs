use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ittt_core::bench::{emit_report, prepare_seed, run_experiment_with, summarize, ExperimentConfig, MetricsRecord};
use ittt_core::check::run_checks;
use ittt_core::Error;

#[derive(Parser)]
#[command(name = "ittt", version, about = "Idempotent test-time training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit, adapt and evaluate the full (method × level × seed) grid.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit one model per seed and save the weights.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate with pre-trained weights instead of fitting.
    Adapt {
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient and invariant self-tests.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const EXIT_ABORTED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

enum Failure {
    Config(anyhow::Error),
    Other(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } => Failure::Config(e.into()),
            e => Failure::Other(e.into()),
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path)
        .map_err(|e| Failure::Config(anyhow::Error::from(e).context(format!("loading {}", path.display()))))?;
    if let Ok(seeds) = std::env::var("ITTT_SEED") {
        cfg.override_seeds(&seeds)?;
        log::info!("seeds overridden by ITTT_SEED: {:?}", cfg.seeds);
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("ittt-out"))
}

fn report(records: &[MetricsRecord], dir: &Path) -> Result<u8, Failure> {
    let summary = summarize(records);
    let paths = emit_report(&summary, records, dir)?;
    println!("{:<12} {:>5} {:>12} {:>10} {:>10} {:>9}", "method", "level", "mean_error", "std", "mean_idem", "overhead");
    for r in &summary {
        println!(
            "{:<12} {:>5} {:>12.5} {:>10.5} {:>10.5} {:>9}",
            r.method,
            r.level,
            r.mean_error,
            r.std_error,
            r.mean_idem,
            r.overhead.map_or("-".into(), |o| format!("{o:.2}"))
        );
    }
    println!("records: {}", paths.records.display());
    println!("summary: {}", paths.summary.display());
    let aborted: Vec<&MetricsRecord> = records.iter().filter(|r| r.aborted).collect();
    for r in &aborted {
        eprintln!(
            "aborted: {} level {} seed {}: {}",
            r.method,
            r.level,
            r.seed,
            r.error.as_deref().unwrap_or("")
        );
    }
    Ok(if aborted.is_empty() { 0 } else { EXIT_ABORTED })
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let records = run_experiment_with(&cfg, None)?;
            report(&records, &out_dir(&cfg, out))
        }
        Command::Adapt { config, weights, out } => {
            let cfg = load_config(&config)?;
            let records = run_experiment_with(&cfg, Some(&weights))?;
            report(&records, &out_dir(&cfg, out))
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let dir = out_dir(&cfg, out);
            std::fs::create_dir_all(&dir)
                .with_context(|| format!("creating {}", dir.display()))
                .map_err(Failure::Other)?;
            for &seed in &cfg.seeds {
                let ctx = prepare_seed(&cfg, seed, None)?;
                let path = dir.join(format!("weights_seed{seed}.bin"));
                ctx.model.save_weights(&path)?;
                println!(
                    "seed {seed}: final loss {:.6}, weights {}",
                    ctx.train_report.final_loss.unwrap_or(f64::NAN),
                    path.display()
                );
            }
            Ok(0)
        }
        Command::Check { seed } => {
            let rep = run_checks(seed)?;
            for item in &rep.items {
                println!("{:<4} {:<32} {:.3e}", if item.passed { "ok" } else { "FAIL" }, item.name, item.value);
            }
            println!(
                "max gradient relative error {:.3e}, {:.0} ms",
                rep.max_gradient_error(),
                rep.elapsed_ms
            );
            Ok(if rep.passed() { 0 } else { EXIT_ABORTED })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ABORTED)
        }
    }
}
