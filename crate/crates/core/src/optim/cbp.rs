//! Continual backpropagation: generate-and-test neuron recycling.
//!
//! Tracks a per-neuron utility as an exponential moving average with bias
//! correction, and reinitializes mature low-utility neurons: incoming
//! weights redrawn (Kaiming-style uniform), outgoing weights zeroed, and
//! the next layer's bias corrected by the neuron's running mean output so
//! replacement is function-preserving on average.

use super::Optimizer;
use crate::net::{BatchActivations, ModuleKind, Network};
use crate::rng;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CbpError {
    #[error("network is not layered as linear -> activation -> ... -> linear")]
    NotLayered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilityKind {
    /// `|h_i| * mean|w_out,i|`
    Contribution,
    /// `|h_i - h̄_i| * mean|w_out,i| / mean|w_in,i|`
    Adaptable,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CbpConfig {
    /// EMA decay for utilities and running mean activations.
    pub rho: f64,
    /// Minimum age (steps since birth) before a neuron may be replaced.
    pub maturity: u64,
    /// Expected replacements per step per layer, as a fraction of the
    /// layer's eligible neurons. Fractions accumulate across steps, so at
    /// most `ceil(rate * n)` neurons are replaced in any single step.
    pub replace_rate: f64,
    pub utility: UtilityKind,
}

impl Default for CbpConfig {
    fn default() -> Self {
        CbpConfig {
            rho: 0.99,
            maturity: 100,
            replace_rate: 1e-4,
            utility: UtilityKind::Contribution,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replacement {
    pub layer: usize,
    pub neuron: usize,
    pub age: u64,
    pub utility: f64,
}

/// One hidden layer of an MLP as seen by the recycler.
#[derive(Debug, Clone)]
struct LayerState {
    /// Linear module producing this layer's pre-activations.
    linear_in: usize,
    /// Activation module whose output is the layer's features.
    act: usize,
    /// Next linear module consuming those features.
    linear_out: usize,
    util: Vec<f64>,
    age: Vec<u64>,
    hbar: Vec<f64>,
    carry: f64,
}

#[derive(Debug, Clone)]
pub struct CbpState {
    pub cfg: CbpConfig,
    layers: Vec<LayerState>,
    rng: rng::Rng,
}

impl CbpState {
    /// Detect hidden layers of a layered MLP: every activation module fed by
    /// a linear module and consumed by a later linear module.
    pub fn for_mlp(net: &Network, cfg: CbpConfig, seed: u64) -> Result<Self, CbpError> {
        let mut layers = Vec::new();
        for (m, module) in net.modules.iter().enumerate() {
            if !matches!(module.kind, ModuleKind::Activation(_)) {
                continue;
            }
            let src_iface = module.inputs[0];
            if src_iface == 0 {
                continue;
            }
            let linear_in = src_iface - 1;
            if !matches!(net.modules[linear_in].kind, ModuleKind::Linear(_)) {
                continue;
            }
            let out_iface = m + 1;
            let consumer = net.modules.iter().enumerate().find(|(_, cand)| {
                matches!(cand.kind, ModuleKind::Linear(_)) && cand.inputs.contains(&out_iface)
            });
            if let Some((linear_out, _)) = consumer {
                let width = net.interface_width(out_iface);
                layers.push(LayerState {
                    linear_in,
                    act: m,
                    linear_out,
                    util: vec![0.0; width],
                    age: vec![0; width],
                    hbar: vec![0.0; width],
                    carry: 0.0,
                });
            }
        }
        if layers.is_empty() {
            return Err(CbpError::NotLayered);
        }
        Ok(CbpState {
            cfg,
            layers,
            rng: rng::seeded(seed),
        })
    }

    /// Bias-corrected utility of every neuron in hidden layer `l`.
    pub fn corrected_utilities(&self, l: usize) -> Vec<f64> {
        let layer = &self.layers[l];
        layer
            .util
            .iter()
            .zip(&layer.age)
            .map(|(&u, &a)| bias_corrected(u, self.cfg.rho, a))
            .collect()
    }

    pub fn ages(&self, l: usize) -> &[u64] {
        &self.layers[l].age
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Update utilities from this step's activations and recycle mature
    /// low-utility neurons. Call after the inner optimizer step for the
    /// iteration. Returns the replacement log.
    pub fn step(
        &mut self,
        net: &mut Network,
        acts: &BatchActivations,
        opt: &mut Optimizer,
    ) -> Vec<Replacement> {
        let mut log = Vec::new();
        let rho = self.cfg.rho;
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let h = &acts.values[layer.act + 1];
            let n_batch = h.nrows() as f64;
            let width = layer.util.len();

            let (w_out_meanabs, w_in_meanabs) = {
                let (ModuleKind::Linear(lin_out), ModuleKind::Linear(lin_in)) = (
                    &net.modules[layer.linear_out].kind,
                    &net.modules[layer.linear_in].kind,
                ) else {
                    unreachable!("layer detection guarantees linear modules");
                };
                let out: Vec<f64> = (0..width)
                    .map(|i| lin_out.weight.column(i).iter().map(|w| w.abs()).sum::<f64>()
                        / lin_out.weight.nrows() as f64)
                    .collect();
                let inw: Vec<f64> = (0..width)
                    .map(|i| lin_in.weight.row(i).iter().map(|w| w.abs()).sum::<f64>()
                        / lin_in.weight.ncols() as f64)
                    .collect();
                (out, inw)
            };

            for i in 0..width {
                let mean_abs_h = h.column(i).iter().map(|v| v.abs()).sum::<f64>() / n_batch;
                let mean_h = h.column(i).sum() / n_batch;
                layer.age[i] += 1;
                let hbar_hat = bias_corrected(layer.hbar[i], rho, layer.age[i].saturating_sub(1));
                let instant = match self.cfg.utility {
                    UtilityKind::Contribution => mean_abs_h * w_out_meanabs[i],
                    UtilityKind::Adaptable => {
                        (mean_abs_h - hbar_hat).abs() * w_out_meanabs[i]
                            / w_in_meanabs[i].max(1e-12)
                    }
                };
                layer.util[i] = rho * layer.util[i] + (1.0 - rho) * instant;
                layer.hbar[i] = rho * layer.hbar[i] + (1.0 - rho) * mean_h;
            }

            // Eligible = mature neurons; fractional replacement budget
            // accumulates until it buys a whole neuron.
            let eligible: Vec<usize> = (0..width)
                .filter(|&i| layer.age[i] > self.cfg.maturity)
                .collect();
            if eligible.is_empty() {
                continue;
            }
            layer.carry += self.cfg.replace_rate * eligible.len() as f64;
            let k = layer.carry.floor() as usize;
            if k == 0 {
                continue;
            }
            layer.carry -= k as f64;
            let mut ranked = eligible;
            ranked.sort_by(|&a, &b| {
                let ua = bias_corrected(layer.util[a], rho, layer.age[a]);
                let ub = bias_corrected(layer.util[b], rho, layer.age[b]);
                ua.partial_cmp(&ub).unwrap()
            });
            for &i in ranked.iter().take(k) {
                let utility = bias_corrected(layer.util[i], rho, layer.age[i]);
                let hbar_hat = bias_corrected(layer.hbar[i], rho, layer.age[i]);
                replace_neuron(net, opt, layer, i, hbar_hat, &mut self.rng);
                log.push(Replacement {
                    layer: li,
                    neuron: i,
                    age: layer.age[i],
                    utility,
                });
                layer.util[i] = 0.0;
                layer.age[i] = 0;
                layer.hbar[i] = 0.0;
            }
        }
        log
    }
}

fn bias_corrected(u: f64, rho: f64, age: u64) -> f64 {
    if age == 0 {
        return 0.0;
    }
    u / (1.0 - rho.powi(age as i32))
}

fn replace_neuron(
    net: &mut Network,
    opt: &mut Optimizer,
    layer: &LayerState,
    i: usize,
    hbar_hat: f64,
    r: &mut rng::Rng,
) {
    let layout = net.param_layout();
    let mut reset_indices = Vec::new();

    // Next-layer bias absorbs the neuron's running mean output, then the
    // outgoing weights are zeroed.
    if let ModuleKind::Linear(lin_out) = &mut net.modules[layer.linear_out].kind {
        for row in 0..lin_out.weight.nrows() {
            lin_out.bias[row] += lin_out.weight[(row, i)] * hbar_hat;
            lin_out.weight[(row, i)] = 0.0;
        }
    }
    // Incoming weights redrawn Kaiming-style, bias zeroed.
    if let ModuleKind::Linear(lin_in) = &mut net.modules[layer.linear_in].kind {
        let fan_in = lin_in.weight.ncols();
        let bound = (6.0 / fan_in as f64).sqrt();
        for col in 0..fan_in {
            lin_in.weight[(i, col)] = r.gen_range(-bound..bound);
        }
        lin_in.bias[i] = 0.0;
    }
    for e in &layout.entries {
        if e.module == layer.linear_in {
            if e.name.ends_with("weight") {
                let ncols = e.shape[1];
                reset_indices.extend((0..ncols).map(|c| e.offset + i * ncols + c));
            } else {
                reset_indices.push(e.offset + i);
            }
        }
        if e.module == layer.linear_out && e.name.ends_with("weight") {
            let ncols = e.shape[1];
            let nrows = e.shape[0];
            reset_indices.extend((0..nrows).map(|row| e.offset + row * ncols + i));
        }
    }
    opt.reset_state_at(&reset_indices);
}
