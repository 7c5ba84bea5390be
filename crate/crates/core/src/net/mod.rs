//! Feed-forward DAG network engine.
//!
//! A [`Network`] is an ordered list of typed modules wired by interface ids.
//! Interface 0 is the network input; interface `i + 1` is the output of
//! module `i`. Modules may only consume earlier interfaces, so the list is
//! topologically sorted by construction and the forward recursion
//! `z(v) = Σ w(u,v) h(u)` is evaluated in one pass.
//!
//! The backward pass propagates post-activation adjoints `δ(v) = ∂L/∂h(v)`
//! in reverse order, accumulating over fan-out, and produces per-parameter
//! gradients `∂L/∂w(u,v) = δ(v) f'(z(v)) h(u)` summed over the batch.

mod builder;
mod gradcheck;
mod loss;
mod module;
mod params;
mod random;
mod serialize;

pub use builder::NetworkBuilder;
pub use gradcheck::{finite_diff_gradient, max_rel_err};
pub use loss::Loss;
pub use module::{
    Activation, BatchNorm, Conv2d, Dropout, LayerNorm, Linear, ModuleCtx, ModuleGrads, ModuleKind,
    Phi,
};
pub use params::{ParamEntry, ParamLayout};
pub use random::random_network;
pub use serialize::{load_params, read_arch, save_params, write_arch, ArchDoc};

use crate::rng;
use crate::Mat;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("module {module} ({kind}): expected input of {expected} features, got {got}")]
    ShapeMismatch {
        module: usize,
        kind: String,
        expected: usize,
        got: usize,
    },
    #[error("module {module} ({kind}): {message}")]
    BadModule {
        module: usize,
        kind: String,
        message: String,
    },
    #[error("network input expects {expected} features, batch has {got}")]
    InputShape { expected: usize, got: usize },
    #[error("backward called before forward (activations do not match this network)")]
    BackwardBeforeForward,
    #[error("loss gradient has shape {got_rows}x{got_cols}, output is {rows}x{cols}")]
    LossGradShape {
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("parameter vector has length {got}, network has {expected} parameters")]
    ParamLength { expected: usize, got: usize },
    #[error("serialization: {0}")]
    Serialize(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Train/eval switch. Train mode samples dropout masks (from the forward
/// seed) and normalizes with batch statistics; eval mode is deterministic
/// and uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Module {
    pub kind: ModuleKind,
    /// Interface ids this module reads. One entry, except ResidualAdd (two).
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub modules: Vec<Module>,
    /// Shape of every interface: `shapes[0]` is the input, `shapes[i+1]`
    /// the output of module `i`. Fixed at construction.
    pub shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn num_interfaces(&self) -> usize {
        self.modules.len() + 1
    }

    pub fn output_interface(&self) -> usize {
        self.modules.len()
    }

    pub fn interface_width(&self, iface: usize) -> usize {
        self.shapes[iface].iter().product()
    }

    pub fn output_width(&self) -> usize {
        self.interface_width(self.output_interface())
    }

    pub fn input_width(&self) -> usize {
        self.shapes[0].iter().product()
    }

    /// Indices of linear modules, in forward order.
    pub fn linear_modules(&self) -> Vec<usize> {
        self.modules
            .iter()
            .enumerate()
            .filter(|(_, m)| matches!(m.kind, ModuleKind::Linear(_)))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Per-node batch state produced by [`forward`]: post-activations `H` per
/// interface, module contexts (dropout masks, normalization statistics),
/// and, after [`backward`], adjoints `Δ = ∂L/∂H` per interface.
#[derive(Debug, Clone)]
pub struct BatchActivations {
    pub mode: Mode,
    pub seed: u64,
    /// `values[i]` is the post-activation matrix of interface `i`
    /// (samples x units).
    pub values: Vec<Mat>,
    pub ctxs: Vec<ModuleCtx>,
    /// Populated by [`backward`]; `adjoints[i] = ∂L/∂values[i]`.
    pub adjoints: Option<Vec<Mat>>,
}

impl BatchActivations {
    pub fn batch_size(&self) -> usize {
        self.values[0].nrows()
    }

    pub fn output(&self) -> &Mat {
        self.values.last().expect("forward produced no interfaces")
    }

    /// Pre-activation matrix seen by module `m` (its input interface).
    pub fn pre_activation(&self, net: &Network, m: usize) -> &Mat {
        &self.values[net.modules[m].inputs[0]]
    }

    /// Elementwise activation derivative `f'(z)` for activation module `m`.
    pub fn activation_deriv(&self, net: &Network, m: usize) -> Mat {
        let ModuleKind::Activation(act) = &net.modules[m].kind else {
            panic!("module {m} is not an activation");
        };
        self.pre_activation(net, m).map(|z| act.deriv(z))
    }
}

/// Per-parameter gradients, aligned with `net.modules`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub modules: Vec<ModuleGrads>,
}

/// Run the forward recursion over the whole DAG.
///
/// Dropout draws its mask from `derive(seed, module_index)`, so two calls
/// with the same seed produce identical masks; eval mode ignores the seed.
pub fn forward(net: &Network, x: &Mat, mode: Mode, seed: u64) -> Result<BatchActivations, NetError> {
    if x.ncols() != net.input_width() {
        return Err(NetError::InputShape {
            expected: net.input_width(),
            got: x.ncols(),
        });
    }
    let mut values: Vec<Mat> = Vec::with_capacity(net.num_interfaces());
    values.push(x.clone());
    let mut ctxs = Vec::with_capacity(net.modules.len());
    for (i, module) in net.modules.iter().enumerate() {
        let ins: Vec<&Mat> = module.inputs.iter().map(|&p| &values[p]).collect();
        let (out, ctx) = module.kind.forward(i, &ins, mode, rng::derive(seed, i as u64))?;
        values.push(out);
        ctxs.push(ctx);
    }
    Ok(BatchActivations {
        mode,
        seed,
        values,
        ctxs,
        adjoints: None,
    })
}

/// Backpropagate `loss_grad = ∂L/∂output` through the DAG.
///
/// Adjoints accumulate across fan-out; the returned gradients are summed
/// over the batch. Stores per-interface adjoints in `acts`.
pub fn backward(
    net: &Network,
    acts: &mut BatchActivations,
    loss_grad: &Mat,
) -> Result<Gradients, NetError> {
    if acts.values.len() != net.num_interfaces() || acts.ctxs.len() != net.modules.len() {
        return Err(NetError::BackwardBeforeForward);
    }
    let out = acts.output();
    if loss_grad.shape() != out.shape() {
        return Err(NetError::LossGradShape {
            rows: out.nrows(),
            cols: out.ncols(),
            got_rows: loss_grad.nrows(),
            got_cols: loss_grad.ncols(),
        });
    }
    let n = acts.batch_size();
    let mut adjoints: Vec<Mat> = (0..net.num_interfaces())
        .map(|i| Mat::zeros(n, net.interface_width(i)))
        .collect();
    adjoints[net.output_interface()] = loss_grad.clone();

    let mut grads = vec![ModuleGrads::None; net.modules.len()];
    for (i, module) in net.modules.iter().enumerate().rev() {
        let out_iface = i + 1;
        let ins: Vec<&Mat> = module.inputs.iter().map(|&p| &acts.values[p]).collect();
        let (dins, g) = module.kind.backward(
            &ins,
            &acts.values[out_iface],
            &acts.ctxs[i],
            &adjoints[out_iface],
            acts.mode,
        );
        grads[i] = g;
        for (port, din) in module.inputs.iter().zip(dins) {
            adjoints[*port] += din;
        }
    }
    acts.adjoints = Some(adjoints);
    Ok(Gradients { modules: grads })
}

/// Fold the batch-normalization statistics observed in a train-mode forward
/// into the network's running statistics (momentum update). Kept separate
/// from [`forward`] so the forward pass itself is pure.
pub fn update_running_stats(net: &mut Network, acts: &BatchActivations) {
    for (i, module) in net.modules.iter_mut().enumerate() {
        if let (
            ModuleKind::BatchNorm(bn),
            ModuleCtx::BatchNorm {
                mean, var_unbiased, ..
            },
        ) = (&mut module.kind, &acts.ctxs[i])
        {
            for c in 0..bn.running_mean.len() {
                bn.running_mean[c] =
                    (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean[c];
                bn.running_var[c] =
                    (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * var_unbiased[c];
            }
        }
    }
}

#[cfg(test)]
mod tests;
