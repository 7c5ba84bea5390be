//! Central-difference gradient oracle. Test and `verify`-path code only;
//! training never goes through here.

use super::{forward, Loss, Mode, NetError, Network};
use crate::Mat;

/// Estimate `∂L/∂θ` for every parameter by central differences.
///
/// Re-runs the full forward pass with the same mode and seed for each
/// perturbation, so dropout masks and batch statistics are held fixed and
/// the estimate differentiates exactly the computation `backward` sees.
pub fn finite_diff_gradient(
    net: &Network,
    x: &Mat,
    target: &Mat,
    loss: Loss,
    mode: Mode,
    seed: u64,
    eps: f64,
) -> Result<Vec<f64>, NetError> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = net.clone();
    let mut params = net.params_flat();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + eps;
        probe.set_params_flat(&params)?;
        let up = loss.value(forward(&probe, x, mode, seed)?.output(), target);
        params[i] = orig - eps;
        probe.set_params_flat(&params)?;
        let down = loss.value(forward(&probe, x, mode, seed)?.output(), target);
        params[i] = orig;
        grad[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Central differences cannot resolve derivatives below cancellation noise
/// (`~eps_machine * |L| / eps`); coordinates where both sides sit under this
/// floor are indistinguishable from zero.
pub const FD_NOISE_FLOOR: f64 = 1e-8;

/// Absolute resolution of the oracle at `eps ~ 1e-5` on O(1)..O(10) losses:
/// the cancellation-vs-truncation optimum leaves ~1e-10 of noise per
/// coordinate; differences inside this band carry no information.
pub const FD_ABS_RESOLUTION: f64 = 1e-9;

/// Largest relative disagreement `|a - b| / (|b| + 1e-12)` between the
/// analytic gradient `a` and the finite-difference estimate `b`, evaluated
/// only where the oracle can resolve a disagreement at all:
///
/// - coordinates whose true derivative is exactly zero (e.g. a bias feeding
///   a normalization layer) come back as pure rounding noise — when both
///   sides are below [`FD_NOISE_FLOOR`] they agree at the oracle's
///   resolution;
/// - differences below [`FD_ABS_RESOLUTION`] are within the oracle's
///   per-coordinate noise and contribute no error.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let both_zeroish = x.abs() < FD_NOISE_FLOOR && y.abs() < FD_NOISE_FLOOR;
            if both_zeroish || (x - y).abs() < FD_ABS_RESOLUTION {
                0.0
            } else {
                (x - y).abs() / (y.abs() + 1e-12)
            }
        })
        .fold(0.0, f64::max)
}
