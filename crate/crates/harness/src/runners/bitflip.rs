//! Online bit-flipping regression with an optional mid-run switch to
//! continual backpropagation.

use super::{forward_seed, labels};
use crate::config::ExperimentConfig;
use crate::runlog::RunLogWriter;
use lop_core::metrics::{network_report, MetricsReport};
use lop_core::net::{backward, forward, Loss, Mode};
use lop_core::optim::CbpState;
use lop_core::rng;
use lop_core::tasks::{build_ltu_target, BitflipStream};
use lop_core::Mat;
use rand::Rng as _;

pub fn run_bitflip(cfg: &ExperimentConfig, seed: u64, log: &mut RunLogWriter) -> anyhow::Result<()> {
    let block = cfg.bitflip.as_ref().expect("validated");
    let arch = cfg.arch.as_ref().expect("validated");
    let target = build_ltu_target(
        block.m,
        block.f,
        block.beta,
        block.target_width,
        rng::derive(seed, labels::TARGET),
    )?;
    let mut stream = BitflipStream::new(&target, block.flip_period, rng::derive(seed, labels::STREAM));
    let mut net = arch.build(rng::derive(seed, labels::INIT));
    let mut opt = cfg.optimizer.build(rng::derive(seed, labels::OPT));

    // Fixed held-out probe batch: metrics are comparable across the run.
    let (x_probe, y_probe) = {
        let mut r = rng::seeded(rng::derive(seed, labels::PROBE));
        let mut x = Mat::zeros(block.probe_batch, block.m + 1);
        let mut y = Mat::zeros(block.probe_batch, 1);
        for s in 0..block.probe_batch {
            let bits: Vec<f64> = (0..block.m)
                .map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 })
                .chain(std::iter::once(1.0))
                .collect();
            y[(s, 0)] = target.eval(&bits);
            for (j, b) in bits.iter().enumerate() {
                x[(s, j)] = *b;
            }
        }
        (x, y)
    };

    let mut cbp: Option<CbpState> = None;
    let mut phase = cfg.optimizer.kind.clone();
    let mut window_loss = 0.0;
    let mut window_n = 0u64;
    let layout = net.param_layout();

    for step in 0..block.samples {
        if block.switch_to_cbp_at == Some(step) {
            cbp = Some(CbpState::for_mlp(
                &net,
                cfg.optimizer.cbp_config(),
                rng::derive(seed, labels::CBP),
            )?);
            phase = "cbp".into();
        }
        let (xv, yv) = stream.next_sample(&target);
        let x = Mat::from_row_slice(1, xv.len(), &xv);
        let y = Mat::from_row_slice(1, 1, &[yv]);
        let mut acts = forward(&net, &x, Mode::Train, forward_seed(seed, step))?;
        let loss = Loss::Mse.value(acts.output(), &y);
        anyhow::ensure!(loss.is_finite(), "loss diverged at step {step}");
        let lg = Loss::Mse.grad(acts.output(), &y);
        let grads = backward(&net, &mut acts, &lg)?;
        let mut params = net.params_flat();
        opt.step(&mut params, &grads.to_flat(&net), Some(&layout))?;
        net.set_params_flat(&params)?;
        lop_core::net::update_running_stats(&mut net, &acts);
        if let Some(state) = cbp.as_mut() {
            state.step(&mut net, &acts, &mut opt);
        }
        window_loss += loss;
        window_n += 1;

        let t = step + 1;
        if t.is_multiple_of(cfg.metrics_cadence) || t == block.samples {
            let mut probe_acts = forward(&net, &x_probe, Mode::Eval, 0)?;
            let plg = Loss::Mse.grad(probe_acts.output(), &y_probe);
            backward(&net, &mut probe_acts, &plg)?;
            let mut report: MetricsReport = network_report(&net, &probe_acts, t);
            report.loss = Some(window_loss / window_n.max(1) as f64);
            report.phase = Some(phase.clone());
            log.append(t, &report)?;
            window_loss = 0.0;
            window_n = 0;
        }
    }
    Ok(())
}
