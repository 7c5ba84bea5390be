//! First-order optimizers with clone-aware state.
//!
//! Every update is an elementwise function of `(param, grad, buffers)`, so
//! block-constant triples map to block-constant triples exactly — the
//! property that keeps training confined to a cloning manifold. The two
//! deliberate exceptions are per-parameter noise (noisy SGD) and decoupled
//! weight decay, both of which break the symmetry.

mod cbp;

pub use cbp::{CbpConfig, CbpState, Replacement, UtilityKind};

use crate::manifolds::{param_block_groups, CloningProfile};
use crate::net::{Network, ParamLayout};
use crate::rng;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in {name}")]
    NonFiniteGrad { name: String },
    #[error("gradient length {got} does not match parameter length {expected}")]
    Length { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimKind {
    Sgd,
    Momentum { beta: f64 },
    #[serde(rename = "rmsprop")]
    RmsProp { beta: f64, eps: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// SGD plus Gaussian gradient noise with per-coordinate standard
    /// deviation `sigma_t * ||g_t||`, `sigma_t = sigma0 * lambda^t`.
    NoisySgd { sigma0: f64, lambda: f64 },
}

impl OptimKind {
    pub fn adam() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn momentum() -> Self {
        OptimKind::Momentum { beta: 0.9 }
    }

    pub fn rmsprop() -> Self {
        OptimKind::RmsProp {
            beta: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f64,
    /// Decoupled weight decay, applied as a separate shrinkage after the
    /// gradient term. Zero by default; per-parameter shrinkage of a
    /// non-block-constant point breaks the cloning symmetry.
    pub weight_decay: f64,
    /// Steps taken; increments by exactly 1 per [`Optimizer::step`].
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    noise_rng: rng::Rng,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64, seed: u64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay: 0.0,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
            noise_rng: rng::seeded(seed),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// Noise scale at the current step: `sigma0 * lambda^t` (noisy SGD only).
    pub fn sigma_t(&self) -> f64 {
        match self.kind {
            OptimKind::NoisySgd { sigma0, lambda } => sigma0 * lambda.powi(self.t as i32),
            _ => 0.0,
        }
    }

    fn ensure_buffers(&mut self, n: usize) {
        if self.m.len() != n {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        }
    }

    /// Apply one update in place. `layout`, when given, names the offending
    /// tensor if a gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        layout: Option<&ParamLayout>,
    ) -> Result<(), OptimError> {
        if params.len() != grads.len() {
            return Err(OptimError::Length {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            let name = layout
                .and_then(|l| l.locate(bad))
                .map(|(e, off)| format!("{}[{}]", e.name, off))
                .unwrap_or_else(|| format!("param[{bad}]"));
            return Err(OptimError::NonFiniteGrad { name });
        }
        self.ensure_buffers(params.len());
        let lr = self.lr;
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimKind::Momentum { beta } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    *m = beta * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimKind::RmsProp { beta, eps } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.v) {
                    *v = beta * *v + (1.0 - beta) * g * g;
                    *p -= lr * g / (v.sqrt() + eps);
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let t = (self.t + 1) as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
            OptimKind::NoisySgd { .. } => {
                let sigma = self.sigma_t();
                let gnorm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                let sd = sigma * gnorm;
                for (p, g) in params.iter_mut().zip(grads) {
                    let noise: f64 = self.noise_rng.sample::<f64, _>(StandardNormal) * sd;
                    *p -= lr * (g + noise);
                }
            }
        }
        if self.weight_decay != 0.0 {
            let shrink = lr * self.weight_decay;
            for p in params.iter_mut() {
                *p -= shrink * *p;
            }
        }
        self.t += 1;
        Ok(())
    }

    /// Zero the state buffers at the given flat indices (used when neurons
    /// are reinitialized).
    pub fn reset_state_at(&mut self, indices: &[usize]) {
        for &i in indices {
            if i < self.m.len() {
                self.m[i] = 0.0;
                self.v[i] = 0.0;
            }
        }
    }

    pub fn buffers(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// Install block means in every optimizer buffer so the state is exactly
/// block-constant under the profile. Fresh zero-initialized buffers are
/// already block-constant and pass through unchanged; subsequent steps
/// preserve block-constancy as long as gradients are block-constant.
pub fn tie_clone_state(opt: &mut Optimizer, net: &Network, profile: &CloningProfile) {
    let n = net.num_params();
    opt.ensure_buffers(n);
    for group in param_block_groups(net, profile) {
        if group.len() < 2 {
            continue;
        }
        let k = group.len() as f64;
        let mean_m = group.iter().map(|&i| opt.m[i]).sum::<f64>() / k;
        let mean_v = group.iter().map(|&i| opt.v[i]).sum::<f64>() / k;
        for &i in &group {
            opt.m[i] = mean_m;
            opt.v[i] = mean_v;
        }
    }
}

/// One forward/backward/update cycle on a network. Returns the batch loss.
pub fn train_step(
    net: &mut Network,
    opt: &mut Optimizer,
    x: &crate::Mat,
    y: &crate::Mat,
    loss: crate::net::Loss,
    mode: crate::net::Mode,
    seed: u64,
) -> Result<f64, crate::net::NetError> {
    let mut acts = crate::net::forward(net, x, mode, seed)?;
    let value = loss.value(acts.output(), y);
    let lg = loss.grad(acts.output(), y);
    let grads = crate::net::backward(net, &mut acts, &lg)?;
    let mut params = net.params_flat();
    let flat = grads.to_flat(net);
    opt.step(&mut params, &flat, None)
        .expect("finite gradients");
    net.set_params_flat(&params)?;
    crate::net::update_running_stats(net, &acts);
    Ok(value)
}
