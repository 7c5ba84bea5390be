//! Entrywise kernel action on correlation matrices and effective-rank
//! functionals.

use super::{CorrelationKernel, KernelError};
use crate::rng;
use crate::Mat;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const DIAG_TOL: f64 = 1e-12;

fn check_unit_diagonal(c: &Mat) -> Result<(), KernelError> {
    for i in 0..c.nrows() {
        if (c[(i, i)] - 1.0).abs() > DIAG_TOL {
            return Err(KernelError::NotUnitDiagonal {
                index: i,
                value: c[(i, i)],
            });
        }
    }
    Ok(())
}

/// Entrywise `K(C_ij)`. The result is again a correlation matrix (a convex
/// combination of Hadamard powers, PSD by the Schur product theorem) with
/// an exactly unit diagonal.
pub fn apply_kernel(c: &Mat, kernel: &CorrelationKernel) -> Result<Mat, KernelError> {
    check_unit_diagonal(c)?;
    let mut out = Mat::zeros(c.nrows(), c.ncols());
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            out[(i, j)] = if i == j {
                1.0
            } else {
                kernel.eval(c[(i, j)].clamp(-1.0, 1.0))?
            };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EffectiveRanks {
    /// `(tr M)² / ||M||_F²`
    pub renyi2: f64,
    /// `exp(-Σ p_i ln p_i)`, `p_i = λ_i / tr M`
    pub shannon: f64,
}

/// Both effective-rank surrogates of a PSD matrix. Eigenvalues below zero
/// by numerical noise are clamped.
pub fn effective_ranks(m: &Mat) -> Result<EffectiveRanks, KernelError> {
    let trace: f64 = (0..m.nrows()).map(|i| m[(i, i)]).sum();
    if trace <= 0.0 {
        return Err(KernelError::ZeroTrace);
    }
    let frob2: f64 = m.iter().map(|v| v * v).sum();
    let renyi2 = trace * trace / frob2;
    let eigen = m.clone().symmetric_eigen();
    let entropy: f64 = eigen
        .eigenvalues
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| {
            let p = l / trace;
            -p * p.ln()
        })
        .sum();
    Ok(EffectiveRanks {
        renyi2,
        shannon: entropy.exp(),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RankGain {
    /// Closed form `(d + Σ_{i≠j} C_ij²) / (d + Σ_{i≠j} K(C_ij)²)`.
    pub ratio: f64,
    /// Independent route: `er_2(K(C)) / er_2(C)` through the materialized
    /// matrices.
    pub ratio_recomputed: f64,
}

/// Rényi-2 rank gain across one nonlinearity, by two routes that must agree
/// within 1e-10.
pub fn rank_gain_ratio(c: &Mat, kernel: &CorrelationKernel) -> Result<RankGain, KernelError> {
    check_unit_diagonal(c)?;
    let d = c.nrows() as f64;
    let mut off_c = 0.0;
    let mut off_k = 0.0;
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            if i == j {
                continue;
            }
            let v = c[(i, j)];
            off_c += v * v;
            let kv = kernel.eval(v.clamp(-1.0, 1.0))?;
            off_k += kv * kv;
        }
    }
    let ratio = (d + off_c) / (d + off_k);
    let mapped = apply_kernel(c, kernel)?;
    let ratio_recomputed = effective_ranks(&mapped)?.renyi2 / effective_ranks(c)?.renyi2;
    Ok(RankGain {
        ratio,
        ratio_recomputed,
    })
}

/// Random unit-diagonal PSD correlation matrix: rows of a Gaussian `d x m`
/// (`m >= d`) factor, normalized. The diagonal is set to exactly 1.
pub fn random_correlation(d: usize, seed: u64) -> Mat {
    let mut r = rng::seeded(seed);
    let m = d + 4;
    let factor = Mat::from_fn(d, m, |_, _| r.sample::<f64, _>(StandardNormal));
    let gram = &factor * factor.transpose();
    let mut c = Mat::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            c[(i, j)] = if i == j {
                1.0
            } else {
                gram[(i, j)] / (gram[(i, i)] * gram[(j, j)]).sqrt()
            };
        }
    }
    c
}
