//! Network persistence.
//!
//! Architecture: a JSON document listing modules with kinds, shapes, and
//! hyperparameters (no weights). Parameters: a flat little-endian `f64`
//! binary file plus a JSON index of `(name, shape, offset)` records;
//! offsets are in bytes. Batch-norm running statistics ride along in the
//! parameter file under their own names so a save/load round-trip restores
//! eval-mode behavior exactly.

use super::module::{
    Activation, BatchNorm, Conv2d, Dropout, LayerNorm, Linear, ModuleKind,
};
use super::{Module, NetError, Network};
use crate::Mat;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchDoc {
    pub input_shape: Vec<usize>,
    pub modules: Vec<ModuleDoc>,
}

fn default_momentum() -> f64 {
    0.1
}
fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModuleDoc {
    Linear {
        #[serde(rename = "in")]
        in_width: usize,
        out: usize,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        k: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
    },
    Batchnorm {
        groups: usize,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Layernorm {
        features: usize,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Activation {
        #[serde(flatten)]
        act: Activation,
    },
    Dropout {
        p: f64,
    },
    /// `out = previous + interfaces[skip]`.
    ResidualAdd {
        skip: usize,
    },
    Flatten,
    SoftmaxOutput,
}

impl Network {
    pub fn to_arch_doc(&self) -> ArchDoc {
        let modules = self
            .modules
            .iter()
            .map(|m| match &m.kind {
                ModuleKind::Linear(l) => ModuleDoc::Linear {
                    in_width: l.weight.ncols(),
                    out: l.weight.nrows(),
                },
                ModuleKind::Conv2d(c) => ModuleDoc::Conv2d {
                    c_in: c.c_in,
                    c_out: c.c_out,
                    k: c.k,
                    pad: c.pad,
                    in_h: c.in_h,
                    in_w: c.in_w,
                },
                ModuleKind::BatchNorm(bn) => ModuleDoc::Batchnorm {
                    groups: bn.gamma.len(),
                    momentum: bn.momentum,
                    eps: bn.eps,
                },
                ModuleKind::LayerNorm(ln) => ModuleDoc::Layernorm {
                    features: ln.gamma.len(),
                    eps: ln.eps,
                },
                ModuleKind::Activation(act) => ModuleDoc::Activation { act: *act },
                ModuleKind::Dropout(d) => ModuleDoc::Dropout { p: d.p },
                ModuleKind::ResidualAdd => ModuleDoc::ResidualAdd { skip: m.inputs[1] },
                ModuleKind::Flatten => ModuleDoc::Flatten,
                ModuleKind::SoftmaxOutput => ModuleDoc::SoftmaxOutput,
            })
            .collect();
        ArchDoc {
            input_shape: self.input_shape.clone(),
            modules,
        }
    }

    /// Instantiate with default-initialized parameters (zero weights, unit
    /// affine scales); load a parameter file afterwards for trained state.
    pub fn from_arch_doc(doc: &ArchDoc) -> Result<Network, NetError> {
        let mut modules = Vec::with_capacity(doc.modules.len());
        let mut shapes = vec![doc.input_shape.clone()];
        for (i, d) in doc.modules.iter().enumerate() {
            let (kind, inputs) = match d {
                ModuleDoc::Linear { in_width, out } => (
                    ModuleKind::Linear(Linear {
                        weight: Mat::zeros(*out, *in_width),
                        bias: DVector::zeros(*out),
                    }),
                    vec![i],
                ),
                ModuleDoc::Conv2d {
                    c_in,
                    c_out,
                    k,
                    pad,
                    in_h,
                    in_w,
                } => (
                    ModuleKind::Conv2d(Conv2d {
                        weight: vec![0.0; c_out * c_in * k * k],
                        bias: vec![0.0; *c_out],
                        c_in: *c_in,
                        c_out: *c_out,
                        k: *k,
                        pad: *pad,
                        in_h: *in_h,
                        in_w: *in_w,
                    }),
                    vec![i],
                ),
                ModuleDoc::Batchnorm {
                    groups,
                    momentum,
                    eps,
                } => {
                    let mut bn = BatchNorm::new(*groups);
                    bn.momentum = *momentum;
                    bn.eps = *eps;
                    (ModuleKind::BatchNorm(bn), vec![i])
                }
                ModuleDoc::Layernorm { features, eps } => {
                    let mut ln = LayerNorm::new(*features);
                    ln.eps = *eps;
                    (ModuleKind::LayerNorm(ln), vec![i])
                }
                ModuleDoc::Activation { act } => (ModuleKind::Activation(*act), vec![i]),
                ModuleDoc::Dropout { p } => (ModuleKind::Dropout(Dropout { p: *p }), vec![i]),
                ModuleDoc::ResidualAdd { skip } => {
                    if *skip > i {
                        return Err(NetError::BadModule {
                            module: i,
                            kind: "residual-add".into(),
                            message: format!("skip interface {skip} is not earlier than {i}"),
                        });
                    }
                    (ModuleKind::ResidualAdd, vec![i, *skip])
                }
                ModuleDoc::Flatten => (ModuleKind::Flatten, vec![i]),
                ModuleDoc::SoftmaxOutput => (ModuleKind::SoftmaxOutput, vec![i]),
            };
            let in_shapes: Vec<&[usize]> = inputs.iter().map(|&p| shapes[p].as_slice()).collect();
            shapes.push(kind.out_shape(i, &in_shapes)?);
            modules.push(Module { kind, inputs });
        }
        Ok(Network {
            input_shape: doc.input_shape.clone(),
            modules,
            shapes,
        })
    }
}

pub fn write_arch(net: &Network, path: &Path) -> Result<(), NetError> {
    let doc = net.to_arch_doc();
    let text = serde_json::to_string_pretty(&doc).map_err(|e| NetError::Serialize(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_arch(path: &Path) -> Result<Network, NetError> {
    let text = std::fs::read_to_string(path)?;
    let doc: ArchDoc =
        serde_json::from_str(&text).map_err(|e| NetError::Serialize(e.to_string()))?;
    Network::from_arch_doc(&doc)
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorIndex {
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the binary file.
    offset: usize,
}

fn state_tensors(net: &Network) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let layout = net.param_layout();
    let flat = net.params_flat();
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = layout
        .entries
        .iter()
        .map(|e| {
            (
                e.name.clone(),
                e.shape.clone(),
                flat[e.offset..e.offset + e.len].to_vec(),
            )
        })
        .collect();
    for (i, m) in net.modules.iter().enumerate() {
        if let ModuleKind::BatchNorm(bn) = &m.kind {
            tensors.push((
                format!("m{i}.running_mean"),
                vec![bn.running_mean.len()],
                bn.running_mean.clone(),
            ));
            tensors.push((
                format!("m{i}.running_var"),
                vec![bn.running_var.len()],
                bn.running_var.clone(),
            ));
        }
    }
    tensors
}

/// Write `<stem>.bin` (little-endian f64, row-major) and `<stem>.json`.
pub fn save_params(net: &Network, stem: &Path) -> Result<(), NetError> {
    let tensors = state_tensors(net);
    let mut index = TensorIndex {
        dtype: "f64-le".into(),
        tensors: Vec::new(),
    };
    let mut bin = std::fs::File::create(stem.with_extension("bin"))?;
    let mut offset = 0usize;
    for (name, shape, data) in &tensors {
        index.tensors.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        for v in data {
            bin.write_all(&v.to_le_bytes())?;
        }
        offset += data.len() * 8;
    }
    let text =
        serde_json::to_string_pretty(&index).map_err(|e| NetError::Serialize(e.to_string()))?;
    std::fs::write(stem.with_extension("json"), text)?;
    Ok(())
}

/// Load tensors written by [`save_params`] back into `net`. Every trainable
/// tensor of `net` must be present with a matching shape.
pub fn load_params(net: &mut Network, stem: &Path) -> Result<(), NetError> {
    let text = std::fs::read_to_string(stem.with_extension("json"))?;
    let index: TensorIndex =
        serde_json::from_str(&text).map_err(|e| NetError::Serialize(e.to_string()))?;
    if index.dtype != "f64-le" {
        return Err(NetError::Serialize(format!(
            "unsupported dtype {}",
            index.dtype
        )));
    }
    let mut raw = Vec::new();
    std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut raw)?;
    let read_tensor = |entry: &TensorEntry| -> Result<Vec<f64>, NetError> {
        let len: usize = entry.shape.iter().product();
        let end = entry.offset + len * 8;
        if end > raw.len() {
            return Err(NetError::Serialize(format!(
                "tensor {} overruns binary file",
                entry.name
            )));
        }
        Ok(raw[entry.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };
    let find = |name: &str| index.tensors.iter().find(|t| t.name == name);

    let layout = net.param_layout();
    let mut flat = net.params_flat();
    for e in &layout.entries {
        let entry = find(&e.name).ok_or_else(|| {
            NetError::Serialize(format!("parameter file is missing tensor {}", e.name))
        })?;
        if entry.shape != e.shape {
            return Err(NetError::Serialize(format!(
                "tensor {} has shape {:?}, network expects {:?}",
                e.name, entry.shape, e.shape
            )));
        }
        flat[e.offset..e.offset + e.len].copy_from_slice(&read_tensor(entry)?);
    }
    net.set_params_flat(&flat)?;
    for (i, m) in net.modules.iter_mut().enumerate() {
        if let ModuleKind::BatchNorm(bn) = &mut m.kind {
            if let Some(entry) = find(&format!("m{i}.running_mean")) {
                bn.running_mean = read_tensor(entry)?;
            }
            if let Some(entry) = find(&format!("m{i}.running_var")) {
                bn.running_var = read_tensor(entry)?;
            }
        }
    }
    Ok(())
}
