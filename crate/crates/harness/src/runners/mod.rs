//! Experiment run loops. Each runner is deterministic in `(config, seed)`
//! and writes one JSONL log per seed; seeds fan out in parallel, one run
//! per worker, each internally single-threaded.

mod bitflip;
mod cloning;
mod continual;
mod kernelsweep;
mod verify;

pub use bitflip::run_bitflip;
pub use cloning::run_cloning;
pub use continual::run_continual;
pub use kernelsweep::run_kernel_sweep;
pub use verify::run_verify;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::runlog::{RunHeader, RunLogWriter};
use std::path::PathBuf;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Stream labels for deriving independent per-run randomness.
pub(crate) mod labels {
    pub const INIT: u64 = 1;
    pub const OPT: u64 = 2;
    pub const TARGET: u64 = 3;
    pub const STREAM: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const STEP: u64 = 6;
    pub const CBP: u64 = 7;
}

pub(crate) fn forward_seed(seed: u64, step: u64) -> u64 {
    lop_core::rng::derive(lop_core::rng::derive(seed, labels::STEP), step)
}

/// Validate, fan seeds out, and run. Returns the per-seed log paths (or the
/// single output file for sweeps).
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<Vec<PathBuf>> {
    let errs = cfg.validate();
    anyhow::ensure!(
        errs.is_empty(),
        "config validation failed:\n  {}",
        errs.join("\n  ")
    );
    let dir = cfg.resolve_output_dir();
    std::fs::create_dir_all(&dir)?;
    match cfg.experiment {
        ExperimentKind::KernelSweep => {
            let path = dir.join("kernel-sweep.csv");
            run_kernel_sweep(cfg, &path)?;
            Ok(vec![path])
        }
        ExperimentKind::Verify => {
            let ok = run_verify(&mut std::io::stdout())?;
            anyhow::ensure!(ok, "verification failed");
            Ok(Vec::new())
        }
        _ => {
            let runs: Vec<(u64, PathBuf)> = cfg
                .seeds
                .iter()
                .map(|&seed| {
                    (
                        seed,
                        dir.join(format!("{}-seed{seed}.jsonl", cfg.experiment.name())),
                    )
                })
                .collect();
            let one = |(seed, path): &(u64, PathBuf)| -> anyhow::Result<PathBuf> {
                let header = RunHeader::new(cfg.hash(), *seed);
                let mut log = RunLogWriter::create(path, &header)?;
                match cfg.experiment {
                    ExperimentKind::Bitflip => run_bitflip(cfg, *seed, &mut log)?,
                    ExperimentKind::Continual => run_continual(cfg, *seed, &mut log)?,
                    ExperimentKind::Cloning => run_cloning(cfg, *seed, &mut log)?,
                    _ => unreachable!(),
                }
                Ok(path.clone())
            };
            #[cfg(feature = "parallel")]
            let results: Vec<anyhow::Result<PathBuf>> = runs.par_iter().map(one).collect();
            #[cfg(not(feature = "parallel"))]
            let results: Vec<anyhow::Result<PathBuf>> = runs.iter().map(one).collect();
            results.into_iter().collect()
        }
    }
}
