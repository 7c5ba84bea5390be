//! Experiment configuration: a JSON document with one block per concern.
//! `validate` reports every problem with its field path.

use lop_core::net::{Activation, Network, Phi};
use lop_core::optim::{CbpConfig, OptimKind, Optimizer, UtilityKind};
use lop_core::rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Continual,
    Cloning,
    Bitflip,
    KernelSweep,
    Verify,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Continual => "continual",
            ExperimentKind::Cloning => "cloning",
            ExperimentKind::Bitflip => "bitflip",
            ExperimentKind::KernelSweep => "kernel-sweep",
            ExperimentKind::Verify => "verify",
        }
    }
}

fn default_cadence() -> u64 {
    100
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_gain() -> f64 {
    1.0
}
fn one() -> f64 {
    1.0
}
fn default_batch() -> usize {
    16
}

/// Layered MLP architecture for the desk-scale experiments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: String,
    #[serde(default = "default_gain")]
    pub gain: f64,
    #[serde(default)]
    pub bias: f64,
    /// none | batch | layer
    #[serde(default)]
    pub norm: Option<String>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub softmax_output: bool,
}

pub fn parse_phi(name: &str) -> Option<Phi> {
    match name {
        "identity" => Some(Phi::Identity),
        "relu" => Some(Phi::Relu),
        "tanh" => Some(Phi::Tanh),
        "gelu" => Some(Phi::Gelu),
        "prelu" => Some(Phi::PRelu { alpha: 0.1 }),
        _ => None,
    }
}

impl MlpSpec {
    pub fn build(&self, seed: u64) -> Network {
        let mut r = rng::seeded(seed);
        let phi = parse_phi(&self.activation).expect("validated activation");
        let act = Activation::with_regime(phi, self.gain, self.bias);
        let mut b = Network::builder(&[self.input]);
        for &w in &self.hidden {
            b = b.linear(w, &mut r);
            match self.norm.as_deref() {
                Some("batch") => b = b.batchnorm(),
                Some("layer") => b = b.layernorm(),
                _ => {}
            }
            b = b.activation_regime(act.phi, act.gain, act.bias);
            if self.dropout > 0.0 {
                b = b.dropout(self.dropout);
            }
        }
        b = b.linear(self.output, &mut r);
        if self.softmax_output {
            b = b.softmax_output();
        }
        b.build().expect("validated mlp spec")
    }

    /// Expansion factors that clone every hidden interface by `k` and leave
    /// input/output untouched.
    pub fn clone_factors(&self, net: &Network, k: usize) -> Vec<usize> {
        let n = net.num_interfaces();
        let last_hidden = n - if self.softmax_output { 3 } else { 2 };
        (0..n)
            .map(|i| if i == 0 || i > last_hidden { 1 } else { k })
            .collect()
    }
}

/// Optimizer block: flat fields, interpreted per kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerBlock {
    /// sgd | momentum | rmsprop | adam | noisy-sgd | cbp
    pub kind: String,
    pub lr: f64,
    #[serde(default)]
    pub sigma0: f64,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// CBP utility EMA decay.
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_maturity")]
    pub tau_maturity: u64,
    #[serde(default = "default_replace")]
    pub r_replace: f64,
    /// contribution | adaptable
    #[serde(default = "default_utility")]
    pub utility: String,
    #[serde(default)]
    pub tie_clones: bool,
}

fn default_rho() -> f64 {
    0.99
}
fn default_maturity() -> u64 {
    100
}
fn default_replace() -> f64 {
    1e-4
}
fn default_utility() -> String {
    "contribution".into()
}

impl OptimizerBlock {
    pub fn sgd(lr: f64) -> Self {
        OptimizerBlock {
            kind: "sgd".into(),
            lr,
            sigma0: 0.0,
            lambda: 1.0,
            weight_decay: 0.0,
            rho: default_rho(),
            tau_maturity: default_maturity(),
            r_replace: default_replace(),
            utility: default_utility(),
            tie_clones: false,
        }
    }

    /// The inner first-order optimizer (for `cbp`, the wrapped one is SGD).
    pub fn build(&self, seed: u64) -> Optimizer {
        let kind = match self.kind.as_str() {
            "sgd" | "cbp" => OptimKind::Sgd,
            "momentum" => OptimKind::momentum(),
            "rmsprop" => OptimKind::rmsprop(),
            "adam" => OptimKind::adam(),
            "noisy-sgd" => OptimKind::NoisySgd {
                sigma0: self.sigma0,
                lambda: self.lambda,
            },
            other => panic!("validated optimizer kind, got {other}"),
        };
        Optimizer::new(kind, self.lr, seed).with_weight_decay(self.weight_decay)
    }

    pub fn cbp_config(&self) -> CbpConfig {
        CbpConfig {
            rho: self.rho,
            maturity: self.tau_maturity,
            replace_rate: self.r_replace,
            utility: if self.utility == "adaptable" {
                UtilityKind::Adaptable
            } else {
                UtilityKind::Contribution
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BitflipBlock {
    pub m: usize,
    pub f: usize,
    pub beta: f64,
    pub target_width: usize,
    pub flip_period: u64,
    pub samples: u64,
    /// Step at which the optimizer switches to CBP (phase tag flips from
    /// the optimizer kind to "cbp").
    #[serde(default)]
    pub switch_to_cbp_at: Option<u64>,
    #[serde(default = "probe_default")]
    pub probe_batch: usize,
}

fn probe_default() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinualBlock {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub separation: f64,
    pub steps_per_task: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub reset_output_layer: bool,
    #[serde(default = "probe_default")]
    pub probe_batch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloningBlock {
    /// Width expansion for every hidden interface.
    #[serde(default = "default_expand")]
    pub expand: usize,
    pub pretrain_steps: u64,
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_r2_threshold")]
    pub r2_threshold: f64,
}

fn default_expand() -> usize {
    2
}
fn default_r2_threshold() -> f64 {
    0.99
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelBlock {
    pub activation: String,
    pub gains: Vec<f64>,
    pub biases: Vec<f64>,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default = "default_quad")]
    pub quad_order: usize,
}

fn default_truncation() -> usize {
    lop_core::kernel::DEFAULT_TRUNCATION
}
fn default_quad() -> usize {
    lop_core::kernel::DEFAULT_QUAD_ORDER
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub arch: Option<MlpSpec>,
    pub optimizer: OptimizerBlock,
    #[serde(default)]
    pub bitflip: Option<BitflipBlock>,
    #[serde(default)]
    pub continual: Option<ContinualBlock>,
    #[serde(default)]
    pub cloning: Option<CloningBlock>,
    #[serde(default)]
    pub kernel: Option<KernelBlock>,
    #[serde(default = "default_cadence")]
    pub metrics_cadence: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

const OPTIMIZER_KINDS: [&str; 6] = ["sgd", "momentum", "rmsprop", "adam", "noisy-sgd", "cbp"];

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok(cfg)
    }

    /// Stable hash of the canonical JSON form, recorded in every run log
    /// header so aggregation can refuse heterogeneous inputs.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// All validation problems, each prefixed with its field path.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push("seeds: must list at least one seed".into());
        }
        if self.metrics_cadence == 0 {
            errs.push("metrics_cadence: must be positive".into());
        }
        if !OPTIMIZER_KINDS.contains(&self.optimizer.kind.as_str()) {
            errs.push(format!(
                "optimizer.kind: unknown kind {:?} (expected one of {:?})",
                self.optimizer.kind, OPTIMIZER_KINDS
            ));
        }
        if self.optimizer.lr <= 0.0 || !self.optimizer.lr.is_finite() {
            errs.push("optimizer.lr: must be positive".into());
        }
        if self.optimizer.sigma0 < 0.0 {
            errs.push("optimizer.sigma0: must be nonnegative".into());
        }
        if self.optimizer.rho <= 0.0 || self.optimizer.rho >= 1.0 {
            errs.push("optimizer.rho: must lie in (0, 1)".into());
        }
        if !["contribution", "adaptable"].contains(&self.optimizer.utility.as_str()) {
            errs.push(format!(
                "optimizer.utility: unknown utility {:?}",
                self.optimizer.utility
            ));
        }
        if let Some(arch) = &self.arch {
            if parse_phi(&arch.activation).is_none() {
                errs.push(format!(
                    "arch.activation: unknown activation {:?}",
                    arch.activation
                ));
            }
            if let Some(norm) = &arch.norm {
                if !["batch", "layer", "none"].contains(&norm.as_str()) {
                    errs.push(format!("arch.norm: unknown normalization {norm:?}"));
                }
            }
            if !(0.0..1.0).contains(&arch.dropout) {
                errs.push("arch.dropout: must lie in [0, 1)".into());
            }
            if arch.input == 0 || arch.output == 0 {
                errs.push("arch: input and output widths must be positive".into());
            }
        }
        match self.experiment {
            ExperimentKind::Bitflip => {
                let Some(b) = &self.bitflip else {
                    errs.push("bitflip: block required for bitflip experiments".into());
                    return errs;
                };
                if !(b.beta > 0.0 && b.beta < 1.0) {
                    errs.push("bitflip.beta: must lie in (0, 1)".into());
                }
                if b.f > b.m {
                    errs.push("bitflip.f: flipping bits cannot exceed input bits".into());
                }
                if b.flip_period == 0 {
                    errs.push("bitflip.flip_period: must be positive".into());
                }
                match &self.arch {
                    None => errs.push("arch: required for bitflip experiments".into()),
                    Some(a) => {
                        if a.input != b.m + 1 {
                            errs.push(format!(
                                "arch.input: must equal bitflip.m + 1 = {} (bias bit), got {}",
                                b.m + 1,
                                a.input
                            ));
                        }
                        if a.output != 1 {
                            errs.push("arch.output: bitflip regression needs one output".into());
                        }
                        if a.softmax_output {
                            errs.push("arch.softmax_output: regression has no softmax".into());
                        }
                    }
                }
                if let Some(s) = b.switch_to_cbp_at {
                    if s >= b.samples {
                        errs.push("bitflip.switch_to_cbp_at: must precede samples".into());
                    }
                }
            }
            ExperimentKind::Continual => {
                let Some(c) = &self.continual else {
                    errs.push("continual: block required for continual experiments".into());
                    return errs;
                };
                if c.n_tasks == 0 || c.classes_per_task == 0 {
                    errs.push("continual: tasks and classes must be positive".into());
                }
                match &self.arch {
                    None => errs.push("arch: required for continual experiments".into()),
                    Some(a) => {
                        if a.input != c.dim {
                            errs.push(format!(
                                "arch.input: must equal continual.dim = {}, got {}",
                                c.dim, a.input
                            ));
                        }
                        if a.output != c.classes_per_task {
                            errs.push(format!(
                                "arch.output: must equal continual.classes_per_task = {}, got {}",
                                c.classes_per_task, a.output
                            ));
                        }
                        if !a.softmax_output {
                            errs.push(
                                "arch.softmax_output: continual classification needs softmax"
                                    .into(),
                            );
                        }
                    }
                }
            }
            ExperimentKind::Cloning => {
                let Some(c) = &self.cloning else {
                    errs.push("cloning: block required for cloning experiments".into());
                    return errs;
                };
                if c.expand == 0 {
                    errs.push("cloning.expand: must be at least 1".into());
                }
                if self.arch.is_none() {
                    errs.push("arch: required for cloning experiments".into());
                }
                if self.optimizer.kind == "cbp" {
                    errs.push("optimizer.kind: cbp is not a confinement optimizer".into());
                }
            }
            ExperimentKind::KernelSweep => {
                let Some(k) = &self.kernel else {
                    errs.push("kernel: block required for kernel sweeps".into());
                    return errs;
                };
                if parse_phi(&k.activation).is_none() {
                    errs.push(format!(
                        "kernel.activation: unknown activation {:?}",
                        k.activation
                    ));
                }
                if k.gains.is_empty() || k.biases.is_empty() {
                    errs.push("kernel: gain and bias grids must be nonempty".into());
                }
                if k.quad_order < 2 * k.truncation {
                    errs.push("kernel.quad_order: must be at least twice the truncation".into());
                }
            }
            ExperimentKind::Verify => {}
        }
        errs
    }

    /// Output directory: explicit config path, else `$LOP_OUT/<kind>`, else
    /// `runs/<kind>`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        let root = std::env::var_os("LOP_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(self.experiment.name())
    }
}
