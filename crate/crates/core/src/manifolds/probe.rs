//! Frozen-unit detection and normal-space curvature probes.

use super::{param_block_groups, CloningProfile, ManifoldError};
use crate::net::{forward, BatchActivations, Loss, Mode, ModuleKind, Network};
use crate::rng;
use crate::Mat;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Units whose activation derivative vanishes on the whole reference batch.
/// With `deriv_tol = 0` (the ReLU setting) membership is exact and every
/// incoming-parameter gradient on that batch is exactly zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrozenSet {
    /// `(activation module index, unit)` pairs.
    pub units: Vec<(usize, usize)>,
    /// `(activation module index, frozen fraction)` per activation layer.
    pub fraction_per_layer: Vec<(usize, f64)>,
}

impl FrozenSet {
    pub fn contains(&self, module: usize, unit: usize) -> bool {
        self.units.iter().any(|&(m, u)| m == module && u == unit)
    }
}

/// Scan every activation module: unit `v` is frozen iff
/// `max over the batch of |f'(z_v)| <= deriv_tol`.
pub fn detect_frozen(net: &Network, acts: &BatchActivations, deriv_tol: f64) -> FrozenSet {
    let mut units = Vec::new();
    let mut fraction_per_layer = Vec::new();
    for (m, module) in net.modules.iter().enumerate() {
        if !matches!(module.kind, ModuleKind::Activation(_)) {
            continue;
        }
        let derivs = acts.activation_deriv(net, m);
        let width = derivs.ncols();
        let mut frozen_here = 0usize;
        for u in 0..width {
            let max_abs = derivs.column(u).iter().fold(0.0f64, |a, &d| a.max(d.abs()));
            if max_abs <= deriv_tol {
                units.push((m, u));
                frozen_here += 1;
            }
        }
        fraction_per_layer.push((m, frozen_here as f64 / width.max(1) as f64));
    }
    FrozenSet {
        units,
        fraction_per_layer,
    }
}

/// Which manifold's normal space to sample curvature directions from.
pub enum NormalSpace<'a> {
    /// Cloning manifold: zero-sum directions inside each block group
    /// (differences within blocks).
    CloneBlocks(&'a CloningProfile),
    /// Frozen-unit manifold: directions supported on the incoming weights
    /// (and bias) of the frozen units.
    FrozenIncoming(&'a FrozenSet),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Unstable,
    Saddle,
    /// Every probed curvature sits below the numerical noise floor.
    Flat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvatureReport {
    /// Second-difference curvature per probed direction.
    pub curvatures: Vec<f64>,
    pub classification: Stability,
    /// Estimated magnitude below which a curvature is indistinguishable
    /// from zero at this `eps`.
    pub noise_floor: f64,
    /// Set when some probed curvature falls under the noise floor (eps too
    /// small for that direction, or the direction is genuinely flat).
    pub eps_warning: bool,
}

/// Sample unit-norm directions in the requested normal space, as flat
/// parameter vectors. Directions with no support (all-singleton blocks, or
/// an empty frozen set) are dropped.
pub fn sample_normal_dirs(
    net: &Network,
    space: &NormalSpace,
    n_dirs: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let total = net.num_params();
    let mut r = rng::seeded(seed);
    let mut dirs = Vec::with_capacity(n_dirs);
    match space {
        NormalSpace::CloneBlocks(profile) => {
            let groups = param_block_groups(net, profile);
            for _ in 0..n_dirs {
                let mut v = vec![0.0; total];
                for g in &groups {
                    if g.len() < 2 {
                        continue;
                    }
                    let vals: Vec<f64> =
                        (0..g.len()).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
                    let mean = vals.iter().sum::<f64>() / g.len() as f64;
                    for (&idx, &x) in g.iter().zip(&vals) {
                        v[idx] = x - mean;
                    }
                }
                if normalize(&mut v) {
                    dirs.push(v);
                }
            }
        }
        NormalSpace::FrozenIncoming(frozen) => {
            let layout = net.param_layout();
            // Incoming parameters of a frozen activation unit live in the
            // linear/conv module feeding the activation's input interface.
            let mut coords: Vec<usize> = Vec::new();
            for &(act_module, unit) in &frozen.units {
                let src_iface = net.modules[act_module].inputs[0];
                if src_iface == 0 {
                    continue;
                }
                let src = src_iface - 1;
                if let ModuleKind::Linear(l) = &net.modules[src].kind {
                    for e in &layout.entries {
                        if e.module != src {
                            continue;
                        }
                        if e.name.ends_with("weight") {
                            let ncols = l.weight.ncols();
                            coords.extend((0..ncols).map(|c| e.offset + unit * ncols + c));
                        } else {
                            coords.push(e.offset + unit);
                        }
                    }
                }
            }
            for _ in 0..n_dirs {
                let mut v = vec![0.0; total];
                for &c in &coords {
                    v[c] = r.sample::<f64, _>(StandardNormal);
                }
                if normalize(&mut v) {
                    dirs.push(v);
                }
            }
        }
    }
    dirs
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// Probe explicit directions: curvature along `v` is
/// `(L(θ+εv) - 2L(θ) + L(θ-εv)) / ε²`.
#[allow(clippy::too_many_arguments)]
pub fn curvature_probe_dirs(
    net: &Network,
    loss: Loss,
    x: &Mat,
    y: &Mat,
    mode: Mode,
    seed: u64,
    dirs: &[Vec<f64>],
    eps: f64,
) -> Result<CurvatureReport, ManifoldError> {
    let theta = net.params_flat();
    let mut probe = net.clone();
    let mut eval = |params: &[f64]| -> Result<f64, ManifoldError> {
        probe.set_params_flat(params)?;
        Ok(loss.value(forward(&probe, x, mode, seed)?.output(), y))
    };
    let l0 = eval(&theta)?;
    let mut curvatures = Vec::with_capacity(dirs.len());
    let mut max_l = l0.abs();
    for v in dirs {
        let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
        let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - eps * d).collect();
        let lp = eval(&plus)?;
        let lm = eval(&minus)?;
        max_l = max_l.max(lp.abs()).max(lm.abs());
        curvatures.push((lp - 2.0 * l0 + lm) / (eps * eps));
    }
    // Second differences cancel ~max|L| down to rounding; anything below
    // this magnitude is noise at the chosen eps.
    let noise_floor = 8.0 * f64::EPSILON * max_l / (eps * eps);
    let pos = curvatures.iter().filter(|&&c| c > noise_floor).count();
    let neg = curvatures.iter().filter(|&&c| c < -noise_floor).count();
    let sub_floor = curvatures.len() - pos - neg;
    let classification = match (pos, neg) {
        (0, 0) => Stability::Flat,
        (_, 0) => Stability::Stable,
        (0, _) => Stability::Unstable,
        _ => Stability::Saddle,
    };
    Ok(CurvatureReport {
        curvatures,
        classification,
        noise_floor,
        eps_warning: sub_floor > 0,
    })
}

/// Sample `n_dirs` directions in the manifold's normal space and probe the
/// loss curvature along each.
#[allow(clippy::too_many_arguments)]
pub fn curvature_probe(
    net: &Network,
    space: &NormalSpace,
    loss: Loss,
    x: &Mat,
    y: &Mat,
    n_dirs: usize,
    eps: f64,
    seed: u64,
) -> Result<CurvatureReport, ManifoldError> {
    let dirs = sample_normal_dirs(net, space, n_dirs, rng::derive(seed, 0x6e6f726d));
    curvature_probe_dirs(net, loss, x, y, Mode::Eval, seed, &dirs, eps)
}
