//! Hermite correlation-kernel analysis.
//!
//! An activation `phi` in operating regime `(gain, bias)` induces a map on
//! pre-activation correlations: for jointly Gaussian unit-variance `(X, Y)`
//! with correlation `r`, the post-activation correlation is
//! `K(r) = Σ_{k>=1} w_k r^k` with `w_k = a_k² / Σ a_l²` from the Hermite
//! coefficients `a_k = E[phi(Z) h_k(Z)]`. The kernel is a convex
//! combination of monomials, so `K(0) = 0`, `K(1) = 1`, and `|K(r)| < |r|`
//! strictly for nonlinear activations — the contraction that drives
//! effective-rank gain through a linear-nonlinear step.

mod mc;
mod quad;
mod rank;
mod sweep;
#[cfg(test)]
mod tests;

pub use mc::{kernel_mc_oracle, kernel_mc_oracle_seq, McEstimate};
pub use quad::{hermite_basis, GaussHermite};
pub use rank::{
    apply_kernel, effective_ranks, random_correlation, rank_gain_ratio, EffectiveRanks, RankGain,
};
pub use sweep::{decorrelation_strength, regime_sweep, Kappa, RegimeRow};

use crate::net::{Activation, Phi};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TRUNCATION: usize = 30;
/// Deeper default for the ReLU family, whose coefficients are closed-form.
pub const RELU_TRUNCATION: usize = 100;
pub const DEFAULT_QUAD_ORDER: usize = 128;
/// Output variance below this marks a frozen regime (degenerate kernel).
pub const DEGENERATE_VAR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("degenerate kernel: activation variance {sigma2:.3e} (frozen regime)")]
    Degenerate { sigma2: f64 },
    #[error("correlation {r} outside [-1, 1]")]
    BadCorrelation { r: f64 },
    #[error("matrix is not unit-diagonal at index {index}: {value}")]
    NotUnitDiagonal { index: usize, value: f64 },
    #[error("quadrature produced a non-finite value")]
    NonFinite,
    #[error("matrix has non-positive trace")]
    ZeroTrace,
    #[error("output variance is zero, correlation undefined")]
    ZeroVariance,
}

/// Hermite coefficients `a_0..a_K` of `phi(gain*z + bias)` and the output
/// variance `sigma² = Σ_{k>=1} a_k²`.
///
/// ReLU-family activations use the exact half-line formulas (Gauss-Hermite
/// converges only algebraically at the kink); smooth activations use
/// quadrature.
pub fn hermite_coeffs(
    act: &Activation,
    truncation: usize,
    quad_order: usize,
) -> Result<(Vec<f64>, f64), KernelError> {
    let coeffs = match act.phi {
        Phi::Relu if act.gain != 0.0 => relu_family_coeffs(act.gain, act.bias, 0.0, truncation),
        Phi::PRelu { alpha } if act.gain != 0.0 => {
            relu_family_coeffs(act.gain, act.bias, alpha, truncation)
        }
        _ => quadrature_coeffs(act, truncation, quad_order)?,
    };
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(KernelError::NonFinite);
    }
    let sigma2: f64 = coeffs[1..].iter().map(|a| a * a).sum();
    Ok((coeffs, sigma2))
}

fn quadrature_coeffs(
    act: &Activation,
    truncation: usize,
    quad_order: usize,
) -> Result<Vec<f64>, KernelError> {
    assert!(
        quad_order >= 2 * truncation,
        "quadrature order must be at least twice the truncation"
    );
    let quad = GaussHermite::new(quad_order);
    let mut coeffs = vec![0.0; truncation + 1];
    // One pass over the nodes, accumulating phi(z) h_k(z) for every k.
    let inv = 1.0 / std::f64::consts::PI.sqrt();
    for (&x, &w) in quad.nodes().iter().zip(quad.weights()) {
        let z = std::f64::consts::SQRT_2 * x;
        let f = act.eval(z);
        let h = hermite_basis(z, truncation);
        for k in 0..=truncation {
            coeffs[k] += w * f * h[k] * inv;
        }
    }
    Ok(coeffs)
}

/// Exact coefficients of `alpha-leaky-ReLU(a z + b)` from half-line Hermite
/// integrals: with `He_k` the monic probabilists' polynomials, `pdf` and `Q`
/// the standard normal density and tail,
/// `∫_{z0}^∞ He_k pdf = He_{k-1}(z0) pdf(z0)` (k >= 1) and `= Q(z0)` (k = 0).
fn relu_family_coeffs(a: f64, b: f64, alpha: f64, truncation: usize) -> Vec<f64> {
    if a < 0.0 {
        // phi((-|a|) z + b) has the coefficients of phi(|a| z + b) with odd
        // orders sign-flipped (Z is symmetric).
        let mut c = relu_family_coeffs(-a, b, alpha, truncation);
        for (k, v) in c.iter_mut().enumerate() {
            if k % 2 == 1 {
                *v = -*v;
            }
        }
        return c;
    }
    let z0 = -b / a;
    let pdf = (-(0.5) * z0 * z0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let tail = 0.5 * libm::erfc(z0 / std::f64::consts::SQRT_2);
    // Monic Hermite values at z0, He_0..He_{truncation+1}.
    let mut he = vec![0.0; truncation + 2];
    he[0] = 1.0;
    if truncation + 1 >= 1 {
        he[1] = z0;
    }
    for k in 1..=truncation {
        he[k + 1] = z0 * he[k] - k as f64 * he[k - 1];
    }
    // I_k = ∫_{z0}^∞ He_k pdf; J_k = ∫_{z0}^∞ z He_k pdf.
    let i = |k: usize| -> f64 {
        if k == 0 {
            tail
        } else if pdf == 0.0 {
            0.0
        } else {
            he[k - 1] * pdf
        }
    };
    let mut coeffs = Vec::with_capacity(truncation + 1);
    let mut sqrt_fact = 1.0f64;
    for k in 0..=truncation {
        if k > 0 {
            sqrt_fact *= (k as f64).sqrt();
        }
        let j = if k == 0 {
            i(1)
        } else {
            i(k + 1) + k as f64 * i(k - 1)
        };
        let relu_part = a * j + b * i(k);
        let linear_part = match k {
            0 => b,
            1 => a,
            _ => 0.0,
        };
        coeffs.push((alpha * linear_part + (1.0 - alpha) * relu_part) / sqrt_fact);
    }
    coeffs
}

/// Truncated, normalized correlation kernel for one activation regime.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationKernel {
    /// `w_1..w_K`, nonnegative, summing to 1 (within rounding).
    pub weights: Vec<f64>,
    pub source: Activation,
    pub truncation: usize,
    pub quad_order: usize,
    /// Variance of the activation output in this regime.
    pub sigma2: f64,
}

impl CorrelationKernel {
    /// Fit at the default truncation. ReLU-family kernels use a deeper
    /// series: their coefficients are closed-form (no quadrature cost) and
    /// the kernel converges only like K^{-3/2} near r = 1, where K = 30
    /// still leaves ~6e-4 error.
    pub fn fit(act: Activation) -> Result<Self, KernelError> {
        let truncation = match act.phi {
            Phi::Relu | Phi::PRelu { .. } => RELU_TRUNCATION,
            _ => DEFAULT_TRUNCATION,
        };
        Self::fit_with(act, truncation, DEFAULT_QUAD_ORDER)
    }

    pub fn fit_with(
        act: Activation,
        truncation: usize,
        quad_order: usize,
    ) -> Result<Self, KernelError> {
        let (coeffs, sigma2) = hermite_coeffs(&act, truncation, quad_order)?;
        if sigma2 <= DEGENERATE_VAR {
            return Err(KernelError::Degenerate { sigma2 });
        }
        let mass: f64 = coeffs[1..].iter().map(|a| a * a).sum();
        let weights: Vec<f64> = coeffs[1..].iter().map(|a| a * a / mass).collect();
        Ok(CorrelationKernel {
            weights,
            source: act,
            truncation,
            quad_order,
            sigma2,
        })
    }

    /// `K(r) = Σ w_k r^k` by Horner evaluation. `K(0) = 0` and `K(1) = 1`
    /// hold exactly by construction.
    pub fn eval(&self, r: f64) -> Result<f64, KernelError> {
        if !(-1.0..=1.0).contains(&r) {
            return Err(KernelError::BadCorrelation { r });
        }
        if r == 0.0 {
            return Ok(0.0);
        }
        if r == 1.0 {
            return Ok(1.0);
        }
        let mut acc = 0.0;
        for &w in self.weights.iter().rev() {
            acc = (acc + w) * r;
        }
        Ok(acc)
    }

    /// `K'(1) = Σ k w_k`; the local decorrelation rate is `K'(1) - 1`.
    pub fn slope_at_one(&self) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, &w)| (i + 1) as f64 * w)
            .sum()
    }
}
