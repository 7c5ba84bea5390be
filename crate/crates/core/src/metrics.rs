//! Plasticity diagnostics over batch activations.
//!
//! Conventions: activation matrices are samples x units. `G` in
//! [`saturated_fraction`] is the gradient with respect to *pre*-activations
//! (`∂L/∂z = ∂L/∂h · f'(z)`), which is what vanishes for a saturated unit.
//! Effective rank is computed on the raw activation matrix; stable rank on
//! the mean-centered one.

use crate::manifolds::Partition;
use crate::net::{BatchActivations, ModuleKind, Network};
use crate::rng;
use crate::Mat;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TAU_DEAD_VAL: f64 = 1e-7;
pub const TAU_DEAD_FRAC: f64 = 0.95;
pub const TAU_CORR: f64 = 0.95;
pub const TAU_SAT: f64 = 1e-4;
pub const P_SAT: f64 = 0.99;
pub const SAT_EPS: f64 = 1e-8;
/// SVD inputs larger than this get uniformly subsampled (fixed seed).
pub const SVD_CAP: usize = 512;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("activation and gradient shapes differ: {h_rows}x{h_cols} vs {g_rows}x{g_cols}")]
    ShapeMismatch {
        h_rows: usize,
        h_cols: usize,
        g_rows: usize,
        g_cols: usize,
    },
}

/// Fraction of units with `|H_ij| < tau_val` on more than `tau_frac` of the
/// samples.
pub fn dead_fraction(h: &Mat, tau_val: f64, tau_frac: f64) -> f64 {
    let n = h.nrows() as f64;
    let mut dead = 0usize;
    for j in 0..h.ncols() {
        let small = h.column(j).iter().filter(|v| v.abs() < tau_val).count();
        if small as f64 / n > tau_frac {
            dead += 1;
        }
    }
    dead as f64 / h.ncols().max(1) as f64
}

/// Units participating in any pair with normalized-column inner product
/// above `tau_corr`, plus the offending pairs. Zero-norm columns are
/// excluded (they count toward dead, not duplicate).
pub fn duplicate_fraction(h: &Mat, tau_corr: f64) -> (f64, Vec<(usize, usize)>) {
    let d = h.ncols();
    let norms: Vec<f64> = (0..d).map(|j| h.column(j).norm()).collect();
    let mut dup = vec![false; d];
    let mut pairs = Vec::new();
    for j in 0..d {
        if norms[j] == 0.0 {
            continue;
        }
        for k in (j + 1)..d {
            if norms[k] == 0.0 {
                continue;
            }
            let dot: f64 = h.column(j).dot(&h.column(k)) / (norms[j] * norms[k]);
            if dot > tau_corr {
                dup[j] = true;
                dup[k] = true;
                pairs.push((j, k));
            }
        }
    }
    let frac = dup.iter().filter(|&&d| d).count() as f64 / d.max(1) as f64;
    (frac, pairs)
}

/// Fraction of units whose pre-activation gradient magnitude, relative to
/// the unit's mean activation magnitude, falls below `tau_sat` on more than
/// `p_sat` of the samples.
pub fn saturated_fraction(
    h: &Mat,
    g: &Mat,
    tau_sat: f64,
    p_sat: f64,
    eps: f64,
) -> Result<f64, MetricsError> {
    if h.shape() != g.shape() {
        return Err(MetricsError::ShapeMismatch {
            h_rows: h.nrows(),
            h_cols: h.ncols(),
            g_rows: g.nrows(),
            g_cols: g.ncols(),
        });
    }
    let n = h.nrows() as f64;
    let mut saturated = 0usize;
    for j in 0..h.ncols() {
        let mu = h.column(j).iter().map(|v| v.abs()).sum::<f64>() / n;
        let denom = mu.max(eps);
        let low = g
            .column(j)
            .iter()
            .filter(|v| v.abs() / denom < tau_sat)
            .count();
        if low as f64 / n > p_sat {
            saturated += 1;
        }
    }
    Ok(saturated as f64 / h.ncols().max(1) as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RankMetrics {
    /// `exp(-Σ p_i ln p_i)` over normalized singular values of `H`.
    pub effective_rank: f64,
    /// `(Σ σ̃²)² / Σ σ̃⁴` over singular values of the mean-centered matrix.
    pub stable_rank: f64,
    /// Set when the matrix (or its centering) is identically zero.
    pub degenerate: bool,
}

fn singular_values(m: &Mat) -> Vec<f64> {
    m.clone().svd(false, false).singular_values.iter().cloned().collect()
}

pub fn rank_metrics(h: &Mat) -> RankMetrics {
    let sv = singular_values(h);
    let total: f64 = sv.iter().sum();
    let (effective_rank, mut degenerate) = if total <= 0.0 {
        (0.0, true)
    } else {
        let entropy: f64 = sv
            .iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| {
                let p = s / total;
                -p * p.ln()
            })
            .sum();
        (entropy.exp(), false)
    };
    let centered = {
        let mut c = h.clone();
        for j in 0..c.ncols() {
            let mean = c.column(j).sum() / c.nrows() as f64;
            for i in 0..c.nrows() {
                c[(i, j)] -= mean;
            }
        }
        c
    };
    let sv2: Vec<f64> = singular_values(&centered).iter().map(|s| s * s).collect();
    let s2: f64 = sv2.iter().sum();
    let s4: f64 = sv2.iter().map(|s| s * s).sum();
    let stable_rank = if s4 > 0.0 {
        s2 * s2 / s4
    } else {
        degenerate = true;
        0.0
    };
    RankMetrics {
        effective_rank,
        stable_rank,
        degenerate,
    }
}

/// [`rank_metrics`] with uniform row/column subsampling (fixed seed) above
/// `cap`, for large probe batches.
pub fn rank_metrics_subsampled(h: &Mat, cap: usize, seed: u64) -> RankMetrics {
    if h.nrows() <= cap && h.ncols() <= cap {
        return rank_metrics(h);
    }
    let mut r = rng::seeded(seed);
    let pick = |n: usize, r: &mut rng::Rng| -> Vec<usize> {
        if n <= cap {
            (0..n).collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(r);
            let mut keep = idx[..cap].to_vec();
            keep.sort_unstable();
            keep
        }
    };
    let rows = pick(h.nrows(), &mut r);
    let cols = pick(h.ncols(), &mut r);
    let sub = Mat::from_fn(rows.len(), cols.len(), |i, j| h[(rows[i], cols[j])]);
    rank_metrics(&sub)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct R2 {
    pub value: f64,
    /// Total variance was zero; the value follows the convention
    /// (1 when residuals are also zero, else 0).
    pub degenerate: bool,
}

/// Variance of unit activations explained by their clone-block means:
/// `1 - Var(residuals) / Var(total)` over all units and samples of the
/// layer. Exactly 1 iff the intra-block spread is zero.
pub fn cloning_r2(h: &Mat, part: &Partition) -> R2 {
    let n = h.nrows();
    let total_elems = (n * h.ncols()) as f64;
    let grand_mean = h.sum() / total_elems;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for block in part.blocks() {
        for s in 0..n {
            let mean: f64 = block.iter().map(|&u| h[(s, u)]).sum::<f64>() / block.len() as f64;
            for &u in block {
                let v = h[(s, u)];
                ss_res += (v - mean) * (v - mean);
                ss_tot += (v - grand_mean) * (v - grand_mean);
            }
        }
    }
    if ss_tot == 0.0 {
        R2 {
            value: if ss_res == 0.0 { 1.0 } else { 0.0 },
            degenerate: true,
        }
    } else {
        R2 {
            value: 1.0 - ss_res / ss_tot,
            degenerate: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Aggregated reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerReport {
    /// Activation module index this layer reports on.
    pub module: usize,
    pub dead_frac: f64,
    pub dup_frac: f64,
    /// Present only when adjoints were available.
    pub sat_frac: Option<f64>,
    pub eff_rank: f64,
    pub stable_rank: f64,
}

/// One metrics row, serialized as a JSONL record by the harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: u64,
    pub layers: Vec<LayerReport>,
    pub mean_dead: f64,
    pub mean_dup: f64,
    pub mean_sat: Option<f64>,
    pub mean_eff_rank: f64,
    pub mean_stable_rank: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2_forward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2_backward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
}

/// Gradient w.r.t. the pre-activations of activation module `m`:
/// `∂L/∂z = ∂L/∂h ⊙ f'(z)`. Requires a prior backward pass.
pub fn preactivation_grads(net: &Network, acts: &BatchActivations, m: usize) -> Option<Mat> {
    let adjoints = acts.adjoints.as_ref()?;
    let derivs = acts.activation_deriv(net, m);
    Some(adjoints[m + 1].component_mul(&derivs))
}

/// Per-activation-layer diagnostics on a forward (and optionally backward)
/// pass. Rank metrics subsample above [`SVD_CAP`].
pub fn network_report(net: &Network, acts: &BatchActivations, step: u64) -> MetricsReport {
    let mut layers = Vec::new();
    for (m, module) in net.modules.iter().enumerate() {
        if !matches!(module.kind, ModuleKind::Activation(_)) {
            continue;
        }
        let h = &acts.values[m + 1];
        let ranks = rank_metrics_subsampled(h, SVD_CAP, rng::derive(0x5d5d, step));
        let sat = preactivation_grads(net, acts, m)
            .map(|g| saturated_fraction(h, &g, TAU_SAT, P_SAT, SAT_EPS).unwrap());
        layers.push(LayerReport {
            module: m,
            dead_frac: dead_fraction(h, TAU_DEAD_VAL, TAU_DEAD_FRAC),
            dup_frac: duplicate_fraction(h, TAU_CORR).0,
            sat_frac: sat,
            eff_rank: ranks.effective_rank,
            stable_rank: ranks.stable_rank,
        });
    }
    let n = layers.len().max(1) as f64;
    let mean = |f: fn(&LayerReport) -> f64| layers.iter().map(f).sum::<f64>() / n;
    let sat_values: Vec<f64> = layers.iter().filter_map(|l| l.sat_frac).collect();
    MetricsReport {
        step,
        mean_dead: mean(|l| l.dead_frac),
        mean_dup: mean(|l| l.dup_frac),
        mean_sat: if sat_values.is_empty() {
            None
        } else {
            Some(sat_values.iter().sum::<f64>() / sat_values.len() as f64)
        },
        mean_eff_rank: mean(|l| l.eff_rank),
        mean_stable_rank: mean(|l| l.stable_rank),
        layers,
        r2_forward: None,
        r2_backward: None,
        loss: None,
        accuracy: None,
        phase: None,
    }
}


#[cfg(test)]
mod prop_tests {
    use super::*;

    proptest::proptest! {
        // Dead/duplicate classification is invariant to sample reordering,
        // and all reported fractions stay in [0, 1].
        #[test]
        fn row_permutation_invariance(seed in 0u64..100, rot in 1usize..7) {
            use rand::Rng as _;
            let mut r = crate::rng::seeded(seed);
            let n = 8;
            let h = Mat::from_fn(n, 5, |_, _| {
                // Mix of live, quiet, and duplicated columns.
                r.gen_range(-1.0..1.0)
            });
            let mut h = h;
            for i in 0..n {
                h[(i, 3)] = h[(i, 1)] * 2.0; // duplicate of column 1
                h[(i, 4)] *= 1e-9; // nearly dead
            }
            let rotated = Mat::from_fn(n, 5, |i, j| h[((i + rot) % n, j)]);
            let dead_a = dead_fraction(&h, TAU_DEAD_VAL, TAU_DEAD_FRAC);
            let dead_b = dead_fraction(&rotated, TAU_DEAD_VAL, TAU_DEAD_FRAC);
            proptest::prop_assert_eq!(dead_a, dead_b);
            let (dup_a, _) = duplicate_fraction(&h, TAU_CORR);
            let (dup_b, _) = duplicate_fraction(&rotated, TAU_CORR);
            proptest::prop_assert_eq!(dup_a, dup_b);
            for v in [dead_a, dup_a] {
                proptest::prop_assert!((0.0..=1.0).contains(&v));
            }
            let ranks = rank_metrics(&h);
            proptest::prop_assert!(ranks.effective_rank >= 1.0 - 1e-9);
            proptest::prop_assert!(ranks.effective_rank <= 5.0 + 1e-9);
        }
    }
}
