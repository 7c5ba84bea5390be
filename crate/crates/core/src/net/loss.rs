//! Batch losses. Values are means over the batch so gradients stay on a
//! comparable scale across batch sizes.

use crate::Mat;
use serde::{Deserialize, Serialize};

const P_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// `(1/n) Σ_s Σ_j (out - target)²`
    Mse,
    /// `-(1/n) Σ_s Σ_j target · ln(out)`; expects probabilities (use a
    /// softmax-output module) and one-hot or soft targets.
    CrossEntropy,
}

impl Loss {
    pub fn value(&self, out: &Mat, target: &Mat) -> f64 {
        let n = out.nrows() as f64;
        match self {
            Loss::Mse => {
                let mut acc = 0.0;
                for (o, t) in out.iter().zip(target.iter()) {
                    let d = o - t;
                    acc += d * d;
                }
                acc / n
            }
            Loss::CrossEntropy => {
                let mut acc = 0.0;
                for (o, t) in out.iter().zip(target.iter()) {
                    if *t != 0.0 {
                        acc -= t * o.max(P_FLOOR).ln();
                    }
                }
                acc / n
            }
        }
    }

    /// `∂L/∂out`, same shape as `out`.
    pub fn grad(&self, out: &Mat, target: &Mat) -> Mat {
        let n = out.nrows() as f64;
        match self {
            Loss::Mse => Mat::from_fn(out.nrows(), out.ncols(), |i, j| {
                2.0 * (out[(i, j)] - target[(i, j)]) / n
            }),
            Loss::CrossEntropy => Mat::from_fn(out.nrows(), out.ncols(), |i, j| {
                if target[(i, j)] == 0.0 {
                    0.0
                } else {
                    -target[(i, j)] / (out[(i, j)].max(P_FLOOR) * n)
                }
            }),
        }
    }
}
