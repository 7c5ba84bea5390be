//! `lop` — experiment CLI for the loss-of-plasticity toolkit.
//!
//! Exit codes: 0 success, 1 config/validation failure, 2 runtime failure.

use clap::{Args, Parser, Subcommand};
use lop_harness::config::{ExperimentConfig, ExperimentKind, KernelBlock, OptimizerBlock};
use lop_harness::runners::{run_experiment, run_kernel_sweep, run_verify};
use lop_harness::{aggregate, plot, runlog};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "lop", version, about = "Loss-of-plasticity experiments: cloning manifolds, kernels, metrics, recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to an experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run a continual-learning experiment (one log per seed).
    Train(ConfigArg),
    /// Run a cloning/confinement experiment.
    Clone(ConfigArg),
    /// Run the bit-flipping plasticity benchmark.
    Bitflip(ConfigArg),
    /// Sweep activation operating regimes to a CSV of kernel quantities.
    Kernel {
        /// identity | relu | tanh | gelu | prelu
        #[arg(long)]
        activation: String,
        /// Comma-separated gain grid.
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        gains: Vec<f64>,
        /// Comma-separated bias grid.
        #[arg(long, value_delimiter = ',', default_value = "0.0", allow_hyphen_values = true)]
        biases: Vec<f64>,
        #[arg(long, default_value_t = lop_core::kernel::DEFAULT_TRUNCATION)]
        truncation: usize,
        #[arg(long, default_value_t = lop_core::kernel::DEFAULT_QUAD_ORDER)]
        quad_order: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-check: gradient oracle, manifold constructions, certificates,
    /// kernel-vs-Monte-Carlo agreement.
    Verify,
    /// Aggregate run logs into windowed mean ± std CSV.
    Aggregate {
        /// Window length in steps.
        #[arg(long, default_value_t = 1000)]
        window: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Run logs (JSONL), one per seed.
        logs: Vec<PathBuf>,
    },
    /// Render a summary CSV to SVG.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// Column for the x axis.
        #[arg(long, default_value = "window_start")]
        x: String,
        /// Comma-separated series stems (plots `<stem>_mean` ± `<stem>_std`).
        #[arg(long, value_delimiter = ',')]
        y: Vec<String>,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a config file and exit.
    Validate(ConfigArg),
}

fn load_for(kind: ExperimentKind, path: &std::path::Path) -> Result<ExperimentConfig, (i32, String)> {
    let cfg = ExperimentConfig::from_path(path).map_err(|e| (1, e.to_string()))?;
    if cfg.experiment != kind {
        return Err((
            1,
            format!(
                "experiment: config declares {:?}, subcommand expects {:?}",
                cfg.experiment.name(),
                kind.name()
            ),
        ));
    }
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err((1, format!("config validation failed:\n  {}", errs.join("\n  "))));
    }
    Ok(cfg)
}

fn run(cfg: &ExperimentConfig) -> Result<(), (i32, String)> {
    let paths = run_experiment(cfg).map_err(|e| (2, e.to_string()))?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn real_main() -> Result<(), (i32, String)> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(a) => run(&load_for(ExperimentKind::Continual, &a.config)?),
        Command::Clone(a) => run(&load_for(ExperimentKind::Cloning, &a.config)?),
        Command::Bitflip(a) => run(&load_for(ExperimentKind::Bitflip, &a.config)?),
        Command::Kernel {
            activation,
            gains,
            biases,
            truncation,
            quad_order,
            out,
        } => {
            let cfg = ExperimentConfig {
                experiment: ExperimentKind::KernelSweep,
                arch: None,
                optimizer: OptimizerBlock::sgd(1.0),
                bitflip: None,
                continual: None,
                cloning: None,
                kernel: Some(KernelBlock {
                    activation,
                    gains,
                    biases,
                    truncation,
                    quad_order,
                }),
                metrics_cadence: 100,
                seeds: vec![0],
                output_dir: None,
            };
            let errs = cfg.validate();
            if !errs.is_empty() {
                return Err((1, format!("invalid kernel sweep:\n  {}", errs.join("\n  "))));
            }
            run_kernel_sweep(&cfg, &out).map_err(|e| (2, e.to_string()))?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Verify => {
            let ok = run_verify(&mut std::io::stdout()).map_err(|e| (2, e.to_string()))?;
            if ok {
                Ok(())
            } else {
                Err((2, "verification failed".into()))
            }
        }
        Command::Aggregate { window, out, logs } => {
            if logs.is_empty() {
                return Err((1, "aggregate: no log files given".into()));
            }
            let parsed: Result<Vec<_>, _> = logs.iter().map(|p| runlog::read_log(p)).collect();
            let parsed = parsed.map_err(|e| (2, e.to_string()))?;
            let csv = aggregate::aggregate(&parsed, window).map_err(|e| (2, e.to_string()))?;
            std::fs::write(&out, csv).map_err(|e| (2, e.to_string()))?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Plot {
            csv,
            x,
            y,
            title,
            out,
        } => {
            if y.is_empty() {
                return Err((1, "plot: empty series list".into()));
            }
            let text = std::fs::read_to_string(&csv).map_err(|e| (2, e.to_string()))?;
            let spec = plot::PlotSpec {
                x,
                series: y,
                title,
            };
            plot::plot_csv(&text, &spec, &out).map_err(|e| (2, e.to_string()))?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Validate(a) => {
            let cfg = ExperimentConfig::from_path(&a.config).map_err(|e| (1, e.to_string()))?;
            let errs = cfg.validate();
            if errs.is_empty() {
                println!("ok: {} experiment, {} seed(s)", cfg.experiment.name(), cfg.seeds.len());
                Ok(())
            } else {
                Err((1, format!("invalid config:\n  {}", errs.join("\n  "))))
            }
        }
    }
}

fn main() {
    if let Err((code, msg)) = real_main() {
        eprintln!("error: {msg}");
        std::process::exit(code);
    }
}
