//! Gauss-Hermite quadrature (physicists' weight `e^{-x^2}`) via
//! Golub-Welsch: eigenvalues of the symmetric tridiagonal companion matrix
//! are the nodes, squared first eigenvector components (times sqrt(pi)) the
//! weights.

use crate::Mat;

#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let mut companion = Mat::zeros(order, order);
        for i in 0..order - 1 {
            let off = ((i + 1) as f64 * 0.5).sqrt();
            companion[(i, i + 1)] = off;
            companion[(i + 1, i)] = off;
        }
        let eigen = companion.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|j| {
                let node = eigen.eigenvalues[j];
                let v0 = eigen.eigenvectors[(0, j)];
                (node, v0 * v0 * std::f64::consts::PI.sqrt())
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // Eigenvector components below the f64 noise floor (~1e-16) turn
        // extreme-node weights that are truly ~e^{-x²} < 1e-32 into garbage
        // around 1e-32, which high-order Hermite factors then amplify.
        // Past |x| ~ 8.5 the true weights sit under that floor while the
        // integrands this crate evaluates (polynomial-times-bounded growth
        // up to degree ~100) have no visible mass there, so those nodes are
        // dropped.
        pairs.retain(|p| p.0.abs() <= 8.5);
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `∫ e^{-x²} f(x) dx`
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// `E[f(Z)]` for `Z ~ N(0, 1)`: substitute `z = sqrt(2) x` and divide by
    /// `sqrt(pi)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let inv = 1.0 / std::f64::consts::PI.sqrt();
        self.integrate(|x| f(std::f64::consts::SQRT_2 * x)) * inv
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Evaluate the orthonormal probabilists' Hermite polynomials
/// `h_0..h_kmax` at `z`: `h_{k+1} = (z h_k - sqrt(k) h_{k-1}) / sqrt(k+1)`.
pub fn hermite_basis(z: f64, kmax: usize) -> Vec<f64> {
    let mut h = Vec::with_capacity(kmax + 1);
    h.push(1.0);
    if kmax >= 1 {
        h.push(z);
    }
    for k in 1..kmax {
        let next = (z * h[k] - (k as f64).sqrt() * h[k - 1]) / ((k + 1) as f64).sqrt();
        h.push(next);
    }
    h
}
