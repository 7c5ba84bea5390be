//! Cloning experiments: pretrain a base model, expand it onto the cloning
//! manifold, then train base and clone in lockstep and log confinement
//! diagnostics.

use super::labels;
use crate::config::ExperimentConfig;
use crate::runlog::RunLogWriter;
use lop_core::manifolds::{
    clone_network, confinement_run, ConfinementConfig, RegressionStream,
};
use lop_core::net::{Loss, Mode};
use lop_core::optim::{tie_clone_state, train_step};
use lop_core::rng;
use serde::Serialize;

#[derive(Serialize)]
struct EscapeSummary {
    step: u64,
    first_escape: Option<u64>,
    r2_threshold: f64,
}

pub fn run_cloning(cfg: &ExperimentConfig, seed: u64, log: &mut RunLogWriter) -> anyhow::Result<()> {
    let block = cfg.cloning.as_ref().expect("validated");
    let arch = cfg.arch.as_ref().expect("validated");
    let mut base = arch.build(rng::derive(seed, labels::INIT));
    let mut stream = RegressionStream::new(
        arch.input,
        arch.output,
        block.batch,
        rng::derive(seed, labels::STREAM),
    );

    // Phase 1: the base model learns the task alone.
    let mut pre_opt = cfg.optimizer.build(rng::derive(seed, labels::OPT));
    for step in 0..block.pretrain_steps {
        let (x, y) = stream.next_batch();
        train_step(
            &mut base,
            &mut pre_opt,
            &x,
            &y,
            Loss::Mse,
            Mode::Train,
            super::forward_seed(seed, step),
        )?;
    }

    // Phase 2: expand and train both in lockstep on identical batches.
    let factors = arch.clone_factors(&base, block.expand);
    let (mut clone, profile) = clone_network(&base, &factors)?;
    let mut opt_base = cfg.optimizer.build(rng::derive(seed, labels::OPT + 100));
    let mut opt_clone = cfg.optimizer.build(rng::derive(seed, labels::OPT + 200));
    if cfg.optimizer.tie_clones {
        tie_clone_state(&mut opt_clone, &clone, &profile);
    }
    let run_cfg = ConfinementConfig {
        steps: block.steps,
        r2_threshold: block.r2_threshold,
        mode: Mode::Train,
        loss: Loss::Mse,
        seed: rng::derive(seed, labels::STEP),
        cadence: cfg.metrics_cadence,
    };
    let outcome = confinement_run(
        &mut base,
        &mut clone,
        &profile,
        &mut opt_base,
        &mut opt_clone,
        &mut |_| stream.next_batch(),
        &run_cfg,
    )?;
    for rec in &outcome.series {
        // Confinement records are cadence-aligned from step 0; log 1-based.
        log.append(rec.step + 1, rec)?;
    }
    log.append(
        block.steps + 1,
        &EscapeSummary {
            step: block.steps + 1,
            first_escape: outcome.first_escape,
            r2_threshold: block.r2_threshold,
        },
    )?;
    Ok(())
}
