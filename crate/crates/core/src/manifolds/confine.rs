//! Lockstep base/clone training with per-step manifold diagnostics.

use super::{drift_residual, network_residual, CloningProfile, ManifoldError};
use crate::metrics::cloning_r2;
use crate::net::{backward, forward, update_running_stats, Loss, Mode, Network};
use crate::optim::Optimizer;
use crate::rng;
use crate::Mat;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Synthetic regression batches from a fixed random linear teacher:
/// `x ~ N(0, I)`, `y = x Wᵀ`.
pub struct RegressionStream {
    teacher: Mat,
    batch: usize,
    rng: rng::Rng,
}

impl RegressionStream {
    pub fn new(d_in: usize, d_out: usize, batch: usize, seed: u64) -> Self {
        let mut tr = rng::seeded(rng::derive(seed, 0x7e8c));
        let teacher = Mat::from_fn(d_out, d_in, |_, _| tr.sample::<f64, _>(StandardNormal));
        RegressionStream {
            teacher,
            batch,
            rng: rng::seeded(seed),
        }
    }

    pub fn next_batch(&mut self) -> (Mat, Mat) {
        let x = Mat::from_fn(self.batch, self.teacher.ncols(), |_, _| {
            self.rng.sample::<f64, _>(StandardNormal)
        });
        let y = &x * self.teacher.transpose();
        (x, y)
    }
}

/// One step of the confinement time series. Serialized as a JSONL row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfinementRecord {
    pub step: u64,
    /// RE/CE residuals of the clone's current parameters.
    pub residual_re: f64,
    pub residual_ce: f64,
    /// BC residual of the drift from the initial point (membership in the
    /// affine family).
    pub residual_bc: f64,
    pub r2_forward: f64,
    pub r2_backward: f64,
    pub loss_base: f64,
    pub loss_clone: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfinementOutcome {
    pub series: Vec<ConfinementRecord>,
    /// First step at which min(r2_forward, r2_backward) fell below the
    /// escape threshold.
    pub first_escape: Option<u64>,
}

pub struct ConfinementConfig {
    pub steps: u64,
    /// R² below this marks an escape from the manifold.
    pub r2_threshold: f64,
    pub mode: Mode,
    pub loss: Loss,
    /// Forward-pass seed root (dropout masks derive from it per step).
    pub seed: u64,
    /// Record every `cadence` steps (1 = every step).
    pub cadence: u64,
}

impl Default for ConfinementConfig {
    fn default() -> Self {
        ConfinementConfig {
            steps: 1000,
            r2_threshold: 0.99,
            mode: Mode::Train,
            loss: Loss::Mse,
            seed: 0,
            cadence: 1,
        }
    }
}

/// Mean cloning R² over the non-trivial interfaces of `values`.
fn mean_r2(net: &Network, profile: &CloningProfile, values: &[Mat]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (iface, vals) in values.iter().enumerate().skip(1) {
        let part = profile.unit_partition(net, iface);
        if part.is_singletons() {
            continue;
        }
        sum += cloning_r2(vals, &part).value;
        count += 1;
    }
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}

/// Train `base` and `clone` in lockstep on identical batches, logging
/// residuals, per-step forward/backward cloning R² (averaged over layers),
/// and both losses. Detects the first escape (R² under the threshold).
///
/// The batch provider yields base-width inputs; clone inputs are lifted
/// through the profile.
pub fn confinement_run(
    base: &mut Network,
    clone: &mut Network,
    profile: &CloningProfile,
    opt_base: &mut Optimizer,
    opt_clone: &mut Optimizer,
    next_batch: &mut dyn FnMut(u64) -> (Mat, Mat),
    cfg: &ConfinementConfig,
) -> Result<ConfinementOutcome, ManifoldError> {
    let start_params = clone.params_flat();
    let mut series = Vec::new();
    let mut first_escape = None;
    for step in 0..cfg.steps {
        let (x, y) = next_batch(step);
        let x_clone = profile.lift_input(&x);

        let mut acts_base = forward(base, &x, cfg.mode, rng::derive(cfg.seed, 2 * step))?;
        let loss_base = cfg.loss.value(acts_base.output(), &y);
        let lg_base = cfg.loss.grad(acts_base.output(), &y);
        let grads_base = backward(base, &mut acts_base, &lg_base)?;

        let mut acts_clone =
            forward(clone, &x_clone, cfg.mode, rng::derive(cfg.seed, 2 * step + 1))?;
        let loss_clone = cfg.loss.value(acts_clone.output(), &y);
        let lg_clone = cfg.loss.grad(acts_clone.output(), &y);
        let grads_clone = backward(clone, &mut acts_clone, &lg_clone)?;

        if step.is_multiple_of(cfg.cadence) {
            // R² is measured on a deterministic eval pass so it reflects
            // parameter divergence, not transient mask asymmetry.
            let mut probe = forward(clone, &x_clone, Mode::Eval, 0)?;
            let plg = cfg.loss.grad(probe.output(), &y);
            backward(clone, &mut probe, &plg)?;
            let r2_forward = mean_r2(clone, profile, &probe.values);
            let r2_backward =
                mean_r2(clone, profile, probe.adjoints.as_ref().expect("backward ran"));
            let res = network_residual(clone, profile);
            let bc = drift_residual(clone, &start_params, profile)?;
            if first_escape.is_none() && r2_forward.min(r2_backward) < cfg.r2_threshold {
                first_escape = Some(step);
            }
            series.push(ConfinementRecord {
                step,
                residual_re: res.re,
                residual_ce: res.ce,
                residual_bc: bc,
                r2_forward,
                r2_backward,
                loss_base,
                loss_clone,
            });
        }

        let mut p = base.params_flat();
        opt_base
            .step(&mut p, &grads_base.to_flat(base), None)
            .expect("finite gradients");
        base.set_params_flat(&p)?;
        update_running_stats(base, &acts_base);

        let mut p = clone.params_flat();
        opt_clone
            .step(&mut p, &grads_clone.to_flat(clone), None)
            .expect("finite gradients");
        clone.set_params_flat(&p)?;
        update_running_stats(clone, &acts_clone);
    }
    Ok(ConfinementOutcome {
        series,
        first_escape,
    })
}
