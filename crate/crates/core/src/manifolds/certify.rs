//! Module-level cloning certificates.
//!
//! Three empirical checks against random blockwise-constant probes:
//!
//! - MC1 (forward interface preservation): blockwise-equal inputs produce
//!   blockwise-equal outputs.
//! - MC2 (backward interface preservation): blockwise-equal output adjoints
//!   produce blockwise-equal input adjoints.
//! - MC3 (gradient closedness): per-edge gradients are block-constant
//!   across inter-block submatrices, so first-order updates stay on the
//!   module's manifold.
//!
//! When every module of a network passes and adjacent interface partitions
//! match, whole-network forward/backward cloning follows by composition.

use super::{ManifoldError, Partition};
use crate::net::{Mode, ModuleGrads, ModuleKind};
use crate::rng;
use crate::Mat;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CertCheck {
    pub pass: bool,
    /// Max intra-block spread observed across all probes.
    pub max_dev: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CertificateReport {
    pub mc1: CertCheck,
    pub mc2: CertCheck,
    pub mc3: CertCheck,
}

pub struct CertifyConfig {
    pub probes: usize,
    pub batch: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Absolute deviation threshold for pass/fail.
    pub tol: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            probes: 4,
            batch: 6,
            mode: Mode::Train,
            seed: 0,
            tol: 1e-12,
        }
    }
}

/// Max spread of values within each unit block, over all samples.
fn block_spread(m: &Mat, part: &Partition) -> f64 {
    let mut dev = 0.0f64;
    for b in part.blocks() {
        if b.len() < 2 {
            continue;
        }
        for s in 0..m.nrows() {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &u in b {
                lo = lo.min(m[(s, u)]);
                hi = hi.max(m[(s, u)]);
            }
            dev = dev.max(hi - lo);
        }
    }
    dev
}

/// Fill the units of each block with its base value.
fn lift(base: &Mat, part: &Partition) -> Mat {
    let mut out = Mat::zeros(base.nrows(), part.n_units());
    for (bi, block) in part.blocks().iter().enumerate() {
        for &u in block {
            for s in 0..base.nrows() {
                out[(s, u)] = base[(s, bi)];
            }
        }
    }
    out
}

fn pair_spread(rows: &Partition, cols: &Partition, w: &dyn Fn(usize, usize) -> f64) -> f64 {
    let mut dev = 0.0f64;
    for rb in rows.blocks() {
        for cb in cols.blocks() {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &r in rb {
                for &c in cb {
                    let v = w(r, c);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            dev = dev.max(hi - lo);
        }
    }
    dev
}

fn vec_spread(part: &Partition, v: &[f64]) -> f64 {
    let mut dev = 0.0f64;
    for b in part.blocks() {
        if b.len() < 2 {
            continue;
        }
        let lo = b.iter().map(|&u| v[u]).fold(f64::INFINITY, f64::min);
        let hi = b.iter().map(|&u| v[u]).fold(f64::NEG_INFINITY, f64::max);
        dev = dev.max(hi - lo);
    }
    dev
}

/// Spread of per-edge gradients inside inter-block submatrices.
fn grad_block_spread(
    kind: &ModuleKind,
    grads: &ModuleGrads,
    in_part: &Partition,
    out_part: &Partition,
) -> f64 {
    match (kind, grads) {
        (ModuleKind::Linear(_), ModuleGrads::Linear { weight, bias }) => {
            pair_spread(out_part, in_part, &|r, c| weight[(r, c)])
                .max(vec_spread(out_part, bias.as_slice()))
        }
        (ModuleKind::Conv2d(c), ModuleGrads::Conv2d { weight, bias }) => {
            let mut dev = vec_spread(out_part, bias);
            for ky in 0..c.k {
                for kx in 0..c.k {
                    dev = dev.max(pair_spread(out_part, in_part, &|co, ci| {
                        weight[((co * c.c_in + ci) * c.k + ky) * c.k + kx]
                    }));
                }
            }
            dev
        }
        (_, ModuleGrads::Affine { gamma, beta }) => {
            vec_spread(out_part, gamma).max(vec_spread(out_part, beta))
        }
        _ => 0.0,
    }
}

/// Run the three certificate checks on one module.
///
/// `in_parts` gives the unit-level partition of each input interface (two
/// for residual-add); `out_part` the output partition. For conv modules the
/// partitions are channel-level and the gradient check runs per kernel tap.
/// Failures are reported, never thrown.
pub fn certify_module(
    kind: &ModuleKind,
    in_parts: &[&Partition],
    out_part: &Partition,
    cfg: &CertifyConfig,
) -> Result<CertificateReport, ManifoldError> {
    // Conv modules take channel partitions; probe data needs unit blocks.
    let (data_in_parts, data_out_part): (Vec<Partition>, Partition) = match kind {
        ModuleKind::Conv2d(c) => {
            let (oh, ow) = c.out_hw();
            (
                vec![in_parts[0].expand_spatial(c.in_h * c.in_w)],
                out_part.expand_spatial(oh * ow),
            )
        }
        _ => (
            in_parts.iter().map(|&p| p.clone()).collect(),
            out_part.clone(),
        ),
    };

    let mut r = rng::seeded(cfg.seed);
    let mut dev1 = 0.0f64;
    let mut dev2 = 0.0f64;
    let mut dev3 = 0.0f64;
    for probe in 0..cfg.probes {
        // Blockwise-equal inputs.
        let ins: Vec<Mat> = data_in_parts
            .iter()
            .map(|p| {
                let base = Mat::from_fn(cfg.batch, p.num_blocks(), |_, _| {
                    r.sample::<f64, _>(StandardNormal)
                });
                lift(&base, p)
            })
            .collect();
        let in_refs: Vec<&Mat> = ins.iter().collect();
        let (out, ctx) = kind.forward(
            0,
            &in_refs,
            cfg.mode,
            rng::derive(cfg.seed, probe as u64),
        )?;
        dev1 = dev1.max(block_spread(&out, &data_out_part));

        // Blockwise-equal output adjoints.
        let dout_base = Mat::from_fn(cfg.batch, data_out_part.num_blocks(), |_, _| {
            r.sample::<f64, _>(StandardNormal)
        });
        let dout = lift(&dout_base, &data_out_part);
        let (dins, grads) = kind.backward(&in_refs, &out, &ctx, &dout, cfg.mode);
        for (din, p) in dins.iter().zip(&data_in_parts) {
            dev2 = dev2.max(block_spread(din, p));
        }
        dev3 = dev3.max(grad_block_spread(kind, &grads, in_parts[0], out_part));
    }
    let check = |dev: f64| CertCheck {
        pass: dev <= cfg.tol,
        max_dev: dev,
    };
    Ok(CertificateReport {
        mc1: check(dev1),
        mc2: check(dev2),
        mc3: check(dev3),
    })
}
