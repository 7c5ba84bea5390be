//! Synthetic continual classification: disjoint class subsets per task,
//! trained sequentially, with plasticity metrics on a fixed probe batch.

use super::{forward_seed, labels};
use crate::config::ExperimentConfig;
use crate::runlog::RunLogWriter;
use lop_core::metrics::network_report;
use lop_core::net::{backward, forward, Loss, Mode, ModuleKind};
use lop_core::rng;
use lop_core::tasks::make_task_sequence;
use lop_core::Mat;

fn argmax_row(m: &Mat, s: usize) -> usize {
    (0..m.ncols())
        .max_by(|&a, &b| m[(s, a)].partial_cmp(&m[(s, b)]).unwrap())
        .unwrap()
}

pub fn run_continual(
    cfg: &ExperimentConfig,
    seed: u64,
    log: &mut RunLogWriter,
) -> anyhow::Result<()> {
    let block = cfg.continual.as_ref().expect("validated");
    let arch = cfg.arch.as_ref().expect("validated");
    let seq = make_task_sequence(
        block.n_tasks,
        block.classes_per_task,
        block.dim,
        block.separation,
        rng::derive(seed, labels::TARGET),
    );
    let mut net = arch.build(rng::derive(seed, labels::INIT));
    let mut opt = cfg.optimizer.build(rng::derive(seed, labels::OPT));
    let layout = net.param_layout();

    // Fixed probe batch spanning every task's distribution.
    let x_probe = {
        let mut batches = Vec::new();
        for t in 0..block.n_tasks {
            let (x, _) = seq.sample_batch(t, block.probe_batch / block.n_tasks.max(1) + 1, u64::MAX);
            batches.push(x);
        }
        let rows: usize = batches.iter().map(|b| b.nrows()).sum();
        let mut x = Mat::zeros(rows, block.dim);
        let mut at = 0;
        for b in &batches {
            for s in 0..b.nrows() {
                for j in 0..block.dim {
                    x[(at, j)] = b[(s, j)];
                }
                at += 1;
            }
        }
        x
    };

    let mut window_loss = 0.0;
    let mut window_correct = 0usize;
    let mut window_n = 0usize;
    let mut global_step = 0u64;
    for task in 0..block.n_tasks {
        if block.reset_output_layer && task > 0 {
            let last_linear = *net.linear_modules().last().expect("mlp has linears");
            if let ModuleKind::Linear(l) = &mut net.modules[last_linear].kind {
                l.weight.fill(0.0);
                l.bias.fill(0.0);
            }
        }
        for step in 0..block.steps_per_task {
            let (x, y) = seq.sample_batch(task, block.batch, step);
            let mut acts = forward(&net, &x, Mode::Train, forward_seed(seed, global_step))?;
            let loss = Loss::CrossEntropy.value(acts.output(), &y);
            anyhow::ensure!(loss.is_finite(), "loss diverged at step {global_step}");
            for s in 0..block.batch {
                if argmax_row(acts.output(), s) == argmax_row(&y, s) {
                    window_correct += 1;
                }
            }
            window_n += block.batch;
            window_loss += loss;
            let lg = Loss::CrossEntropy.grad(acts.output(), &y);
            let grads = backward(&net, &mut acts, &lg)?;
            let mut params = net.params_flat();
            opt.step(&mut params, &grads.to_flat(&net), Some(&layout))?;
            net.set_params_flat(&params)?;
            lop_core::net::update_running_stats(&mut net, &acts);

            global_step += 1;
            if global_step.is_multiple_of(cfg.metrics_cadence) {
                let probe_acts = forward(&net, &x_probe, Mode::Eval, 0)?;
                let mut report = network_report(&net, &probe_acts, global_step);
                report.loss = Some(window_loss * block.batch as f64 / window_n.max(1) as f64);
                report.accuracy = Some(window_correct as f64 / window_n.max(1) as f64);
                report.phase = Some(format!("task{task}"));
                log.append(global_step, &report)?;
                window_loss = 0.0;
                window_correct = 0;
                window_n = 0;
            }
        }
    }
    Ok(())
}
