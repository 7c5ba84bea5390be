//! Flat parameter views. Optimizers and finite differences address the
//! network as one `Vec<f64>`; the layout maps slices back to named tensors.
//! Matrices flatten row-major.

use super::module::{ModuleGrads, ModuleKind};
use super::{Gradients, NetError, Network};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub module: usize,
    /// e.g. `m0.weight`, `m2.gamma`.
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Tensor dims as stored in the flat view (row-major): `[out, in]`,
    /// `[c_out, c_in, k, k]`, or `[len]`.
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    /// Name of the tensor owning flat index `i`, with the in-tensor offset.
    pub fn locate(&self, i: usize) -> Option<(&ParamEntry, usize)> {
        self.entries
            .iter()
            .find(|e| i >= e.offset && i < e.offset + e.len)
            .map(|e| (e, i - e.offset))
    }
}

impl Network {
    pub fn param_layout(&self) -> ParamLayout {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |module: usize, name: &str, len: usize, shape: Vec<usize>| {
            entries.push(ParamEntry {
                module,
                name: format!("m{module}.{name}"),
                offset,
                len,
                shape,
            });
            offset += len;
        };
        for (i, m) in self.modules.iter().enumerate() {
            match &m.kind {
                ModuleKind::Linear(l) => {
                    push(i, "weight", l.weight.len(), vec![l.weight.nrows(), l.weight.ncols()]);
                    push(i, "bias", l.bias.len(), vec![l.bias.len()]);
                }
                ModuleKind::Conv2d(c) => {
                    push(i, "weight", c.weight.len(), vec![c.c_out, c.c_in, c.k, c.k]);
                    push(i, "bias", c.bias.len(), vec![c.bias.len()]);
                }
                ModuleKind::BatchNorm(bn) => {
                    push(i, "gamma", bn.gamma.len(), vec![bn.gamma.len()]);
                    push(i, "beta", bn.beta.len(), vec![bn.beta.len()]);
                }
                ModuleKind::LayerNorm(ln) => {
                    push(i, "gamma", ln.gamma.len(), vec![ln.gamma.len()]);
                    push(i, "beta", ln.beta.len(), vec![ln.beta.len()]);
                }
                _ => {}
            }
        }
        ParamLayout { entries, total: offset }
    }

    pub fn num_params(&self) -> usize {
        self.param_layout().total
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in &self.modules {
            match &m.kind {
                ModuleKind::Linear(l) => {
                    for r in 0..l.weight.nrows() {
                        for c in 0..l.weight.ncols() {
                            out.push(l.weight[(r, c)]);
                        }
                    }
                    out.extend(l.bias.iter());
                }
                ModuleKind::Conv2d(c) => {
                    out.extend(&c.weight);
                    out.extend(&c.bias);
                }
                ModuleKind::BatchNorm(bn) => {
                    out.extend(&bn.gamma);
                    out.extend(&bn.beta);
                }
                ModuleKind::LayerNorm(ln) => {
                    out.extend(&ln.gamma);
                    out.extend(&ln.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, v: &[f64]) -> Result<(), NetError> {
        let expected = self.num_params();
        if v.len() != expected {
            return Err(NetError::ParamLength {
                expected,
                got: v.len(),
            });
        }
        let mut pos = 0;
        let mut take = |len: usize| {
            let s = &v[pos..pos + len];
            pos += len;
            s
        };
        for m in &mut self.modules {
            match &mut m.kind {
                ModuleKind::Linear(l) => {
                    let (rows, cols) = (l.weight.nrows(), l.weight.ncols());
                    let w = take(rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            l.weight[(r, c)] = w[r * cols + c];
                        }
                    }
                    l.bias.as_mut_slice().copy_from_slice(take(rows));
                }
                ModuleKind::Conv2d(c) => {
                    let n = c.weight.len();
                    c.weight.copy_from_slice(take(n));
                    let n = c.bias.len();
                    c.bias.copy_from_slice(take(n));
                }
                ModuleKind::BatchNorm(bn) => {
                    let n = bn.gamma.len();
                    bn.gamma.copy_from_slice(take(n));
                    bn.beta.copy_from_slice(take(n));
                }
                ModuleKind::LayerNorm(ln) => {
                    let n = ln.gamma.len();
                    ln.gamma.copy_from_slice(take(n));
                    ln.beta.copy_from_slice(take(n));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl Gradients {
    /// Flatten in the same order as [`Network::params_flat`].
    pub fn to_flat(&self, net: &Network) -> Vec<f64> {
        let mut out = Vec::with_capacity(net.num_params());
        for (m, g) in net.modules.iter().zip(&self.modules) {
            match (&m.kind, g) {
                (ModuleKind::Linear(_), ModuleGrads::Linear { weight, bias }) => {
                    for r in 0..weight.nrows() {
                        for c in 0..weight.ncols() {
                            out.push(weight[(r, c)]);
                        }
                    }
                    out.extend(bias.iter());
                }
                (ModuleKind::Conv2d(_), ModuleGrads::Conv2d { weight, bias }) => {
                    out.extend(weight);
                    out.extend(bias);
                }
                (ModuleKind::BatchNorm(_), ModuleGrads::Affine { gamma, beta })
                | (ModuleKind::LayerNorm(_), ModuleGrads::Affine { gamma, beta }) => {
                    out.extend(gamma);
                    out.extend(beta);
                }
                _ => {}
            }
        }
        out
    }
}
