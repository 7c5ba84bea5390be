//! Decorrelation strength and operating-regime sweeps.

use super::{CorrelationKernel, GaussHermite, KernelError};
use crate::net::{Activation, Phi};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Kappa {
    /// `max_{r in [0,1]} (r² - K(r)²)` — the largest per-entry reduction of
    /// squared correlation. Zero iff the kernel is linear.
    pub kappa: f64,
    pub r_star: f64,
}

/// Coarse grid over `[0, 1]` followed by golden-section refinement of
/// `f(r) = r² - K(r)²` around the best grid point.
pub fn decorrelation_strength(
    kernel: &CorrelationKernel,
    grid_n: usize,
) -> Result<Kappa, KernelError> {
    let n = grid_n.max(3);
    let f = |r: f64| -> Result<f64, KernelError> {
        let k = kernel.eval(r)?;
        Ok(r * r - k * k)
    };
    let mut best_i = 0;
    let mut best = f64::NEG_INFINITY;
    for i in 0..n {
        let r = i as f64 / (n - 1) as f64;
        let v = f(r)?;
        if v > best {
            best = v;
            best_i = i;
        }
    }
    // Golden-section on the bracket around the best grid point.
    let step = 1.0 / (n - 1) as f64;
    let mut a = (best_i as f64 * step - step).max(0.0);
    let mut b = (best_i as f64 * step + step).min(1.0);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while b - a > 1e-10 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = f(x2)?;
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = f(x1)?;
        }
    }
    let r_star = 0.5 * (a + b);
    let kappa = f(r_star)?.max(best).max(0.0);
    Ok(Kappa { kappa, r_star })
}

/// One row of a regime sweep, CSV-ready.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegimeRow {
    pub a: f64,
    pub b: f64,
    /// Decorrelation strength; 0 for degenerate regimes.
    pub kappa: f64,
    pub r_star: f64,
    /// Local decorrelation rate `E[f'(Z)²] / Var(f(Z)) - 1` where `f` is
    /// the full reparameterized activation.
    pub alpha: f64,
    /// Saturation signal: `P(a Z + b < 0)` for ReLU-family activations,
    /// `E[phi'(a Z + b)²]` (base derivative) otherwise.
    pub frozen_proxy: f64,
    /// Output variance vanished; kernel quantities are reported as 0.
    pub degenerate: bool,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Local decorrelation rate by quadrature: `E[f'(Z)²] / Var(f(Z)) - 1`.
/// Agrees with `K'(1) - 1` of the fitted kernel.
pub fn local_decorrelation_rate(act: &Activation, quad_order: usize) -> f64 {
    let quad = GaussHermite::new(quad_order);
    let e_d2 = quad.expect(|z| {
        let d = act.deriv(z);
        d * d
    });
    let mean = quad.expect(|z| act.eval(z));
    let e_f2 = quad.expect(|z| {
        let v = act.eval(z);
        v * v
    });
    let var = e_f2 - mean * mean;
    if var <= 0.0 {
        return 0.0;
    }
    e_d2 / var - 1.0
}

fn frozen_proxy(act: &Activation, quad_order: usize) -> f64 {
    match act.phi {
        // Exact Gaussian probability of the dead half-line.
        Phi::Relu | Phi::PRelu { .. } => normal_cdf(-act.bias / act.gain),
        _ => {
            let quad = GaussHermite::new(quad_order);
            quad.expect(|z| {
                let d = act.base_deriv(z);
                d * d
            })
        }
    }
}

/// Sweep `(gain, bias)` regimes for one activation, linking decorrelation
/// strength to saturation. Degenerate regimes are flagged, not errors.
pub fn regime_sweep(
    phi: Phi,
    gains: &[f64],
    biases: &[f64],
    truncation: usize,
    quad_order: usize,
    grid_n: usize,
) -> Vec<RegimeRow> {
    let mut rows = Vec::with_capacity(gains.len() * biases.len());
    for &a in gains {
        for &b in biases {
            let act = Activation::with_regime(phi, a, b);
            let row = match CorrelationKernel::fit_with(act, truncation, quad_order) {
                Ok(kernel) => {
                    let kappa = decorrelation_strength(&kernel, grid_n)
                        .expect("grid evaluation stays in [-1, 1]");
                    RegimeRow {
                        a,
                        b,
                        kappa: kappa.kappa,
                        r_star: kappa.r_star,
                        alpha: local_decorrelation_rate(&act, quad_order),
                        frozen_proxy: frozen_proxy(&act, quad_order),
                        degenerate: false,
                    }
                }
                Err(KernelError::Degenerate { .. }) => RegimeRow {
                    a,
                    b,
                    kappa: 0.0,
                    r_star: 0.0,
                    alpha: 0.0,
                    frozen_proxy: frozen_proxy(&act, quad_order),
                    degenerate: true,
                },
                Err(e) => panic!("regime sweep quadrature failed: {e}"),
            };
            rows.push(row);
        }
    }
    rows
}
