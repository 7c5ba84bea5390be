//! Loss-of-plasticity analysis toolkit.
//!
//! Small feed-forward networks trap gradient descent on two kinds of
//! parameter-space manifolds: frozen-unit manifolds (saturated activations
//! zero out all incoming gradients) and cloning manifolds (row/column
//! equitable weight blocks keep duplicated units identical forever). This
//! crate makes those structures executable at desk scale:
//!
//! - [`net`] — a 64-bit DAG network engine with exact forward/backward
//!   passes and a finite-difference gradient oracle.
//! - [`manifolds`] — equitability checks, quotient networks, cloning
//!   operators, module certificates, confinement runs, and curvature probes.
//! - [`optim`] — first-order optimizers with clone-aware state, noisy SGD,
//!   and continual backpropagation (generate-and-test neuron recycling).
//! - [`kernel`] — Hermite correlation kernels, decorrelation strength, and
//!   effective-rank functionals for the rank-gain analysis.
//! - [`metrics`] — dead/duplicate/saturated fractions, effective and stable
//!   rank, cloning R².
//! - [`tasks`] — the bit-flipping LTU regression stream and a synthetic
//!   continual classification sequence.
//!
//! All arithmetic is `f64`; manifold drift is measured at the 1e-10 scale,
//! which single precision cannot resolve.

pub mod kernel;
pub mod manifolds;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod rng;
pub mod tasks;

pub use nalgebra::{DMatrix, DVector};

/// Batch matrix convention used throughout: rows are samples, columns are
/// units (features, or channel-major `c*h*w` positions for conv shapes).
pub type Mat = DMatrix<f64>;
