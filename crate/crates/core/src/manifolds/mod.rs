//! Cloning and frozen-unit manifolds.
//!
//! A clone-block structure on a network is a partition of each interface's
//! ports into blocks. Three nested weight conditions matter, per inter-block
//! submatrix:
//!
//! - RE (row-equitable): all row sums equal — forward values of units in a
//!   block coincide on any input.
//! - CE (column-equitable): all column sums equal — backward adjoints
//!   coincide, and with RE the per-edge gradients are block-constant.
//! - BC (block-constant): all entries equal. BC ⊂ RE ∩ CE.
//!
//! Training started at an RE∩CE point with block-constant optimizer state
//! drifts only by block-constant increments, so it never leaves the affine
//! family — the trap this module constructs, verifies, and probes.
//!
//! Partitions are per-interface, so intra-block edges cannot exist by
//! construction: all edges run between interfaces through modules.

mod certify;
mod clone;
mod confine;
mod probe;

pub use certify::{certify_module, CertCheck, CertificateReport, CertifyConfig};
pub use clone::{clone_network, quotient_network, redistribute};
pub use confine::{
    confinement_run, ConfinementConfig, ConfinementOutcome, ConfinementRecord, RegressionStream,
};
pub use probe::{
    curvature_probe, curvature_probe_dirs, detect_frozen, sample_normal_dirs, CurvatureReport,
    FrozenSet, NormalSpace, Stability,
};

use crate::net::{ModuleKind, Network};
use crate::Mat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("partition blocks must be disjoint, nonempty, and cover 0..{n}")]
    BadPartition { n: usize },
    #[error("partition covers {partition} units, matrix axis has {axis}")]
    PartitionShape { partition: usize, axis: usize },
    #[error("interface {iface}: expansion factor {got} conflicts with {expected} required by module {module}")]
    InconsistentFactors {
        iface: usize,
        got: usize,
        expected: usize,
        module: usize,
    },
    #[error("expansion factors must be >= 1")]
    ZeroFactor,
    #[error("expected {expected} factors (one per interface), got {got}")]
    FactorCount { expected: usize, got: usize },
    #[error("network is not on the RE∩CE manifold within tol {tol}: re={re:.3e} ce={ce:.3e}")]
    OffManifold { re: f64, ce: f64, tol: f64 },
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

/// Relative tolerance for manifold membership, with [`ABS_FLOOR`] guarding
/// zero-scale blocks.
pub const MEMBERSHIP_TOL: f64 = 1e-9;
pub const ABS_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Partition
// ---------------------------------------------------------------------------

/// Disjoint, nonempty blocks covering the ports `0..n` of one interface.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
    n: usize,
}

impl Partition {
    pub fn new(blocks: Vec<Vec<usize>>) -> Result<Self, ManifoldError> {
        let n: usize = blocks.iter().map(|b| b.len()).sum();
        let mut seen = vec![false; n];
        for b in &blocks {
            if b.is_empty() {
                return Err(ManifoldError::BadPartition { n });
            }
            for &u in b {
                if u >= n || seen[u] {
                    return Err(ManifoldError::BadPartition { n });
                }
                seen[u] = true;
            }
        }
        Ok(Partition { blocks, n })
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            blocks: (0..n).map(|u| vec![u]).collect(),
            n,
        }
    }

    /// `base` contiguous blocks of `factor` ports each: block `j` is
    /// `[j*factor, (j+1)*factor)`.
    pub fn uniform(base: usize, factor: usize) -> Self {
        Partition {
            blocks: (0..base)
                .map(|j| (j * factor..(j + 1) * factor).collect())
                .collect(),
            n: base * factor,
        }
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_units(&self) -> usize {
        self.n
    }

    pub fn is_singletons(&self) -> bool {
        self.blocks.len() == self.n
    }

    /// Map each unit to its block index.
    pub fn block_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.n];
        for (bi, b) in self.blocks.iter().enumerate() {
            for &u in b {
                out[u] = bi;
            }
        }
        out
    }

    /// Turn a channel partition into the induced partition of the flattened
    /// `channels * spatial` units (channel-major layout): block `(j, p)`
    /// holds unit `c*spatial + p` for every channel `c` in block `j`.
    pub fn expand_spatial(&self, spatial: usize) -> Partition {
        if spatial == 1 {
            return self.clone();
        }
        let mut blocks = Vec::with_capacity(self.blocks.len() * spatial);
        for b in &self.blocks {
            for p in 0..spatial {
                blocks.push(b.iter().map(|&c| c * spatial + p).collect());
            }
        }
        Partition {
            blocks,
            n: self.n * spatial,
        }
    }
}

// ---------------------------------------------------------------------------
// Equitability
// ---------------------------------------------------------------------------

/// One membership mode: pass/fail at the requested tolerance plus the
/// relative residual that was measured.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModeCheck {
    pub pass: bool,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EquitabilityReport {
    pub re: ModeCheck,
    pub ce: ModeCheck,
    pub bc: ModeCheck,
}

/// Max deviation per membership mode, relative to the block weight scale.
/// Zero in all components iff the point is exactly on the corresponding
/// manifold.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ManifoldResidual {
    pub re: f64,
    pub ce: f64,
    pub bc: f64,
}

impl ManifoldResidual {
    fn fold(&mut self, other: ManifoldResidual) {
        self.re = self.re.max(other.re);
        self.ce = self.ce.max(other.ce);
        self.bc = self.bc.max(other.bc);
    }

    pub fn report(&self, tol: f64) -> EquitabilityReport {
        let check = |r: f64| ModeCheck {
            pass: r <= tol,
            residual: r,
        };
        EquitabilityReport {
            re: check(self.re),
            ce: check(self.ce),
            bc: check(self.bc),
        }
    }
}

/// Pairwise (cascade) summation: exact for 2^k identical addends, and the
/// accuracy floor the bit-level round-trip guarantees rely on.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

fn spread(values: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if values.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Residuals of one inter-block submatrix `w[rows x cols]` accessed through
/// a closure (so dense matrices and conv taps share the code).
fn pair_residual(
    rows: &[usize],
    cols: &[usize],
    w: &dyn Fn(usize, usize) -> f64,
) -> ManifoldResidual {
    let mut entries = Vec::with_capacity(rows.len() * cols.len());
    let mut row_sums = Vec::with_capacity(rows.len());
    for &r in rows {
        let vals: Vec<f64> = cols.iter().map(|&c| w(r, c)).collect();
        row_sums.push(pairwise_sum(&vals));
        entries.extend(vals);
    }
    let col_sums: Vec<f64> = cols
        .iter()
        .map(|&c| pairwise_sum(&rows.iter().map(|&r| w(r, c)).collect::<Vec<_>>()))
        .collect();
    let entry_scale = entries.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let sum_scale = row_sums
        .iter()
        .chain(&col_sums)
        .fold(0.0f64, |a, &v| a.max(v.abs()));
    let denom = ABS_FLOOR.max(entry_scale).max(sum_scale);
    ManifoldResidual {
        re: spread(&row_sums) / denom,
        ce: spread(&col_sums) / denom,
        bc: spread(&entries) / denom,
    }
}

/// Check a block-partitioned weight matrix against the three membership
/// modes. `w` is `rows x cols` = (out units) x (in units); "row sums" run
/// over the in-axis, matching the forward recursion.
pub fn equitability_check(
    w: &Mat,
    row_part: &Partition,
    col_part: &Partition,
    tol: f64,
) -> Result<EquitabilityReport, ManifoldError> {
    if row_part.n_units() != w.nrows() {
        return Err(ManifoldError::PartitionShape {
            partition: row_part.n_units(),
            axis: w.nrows(),
        });
    }
    if col_part.n_units() != w.ncols() {
        return Err(ManifoldError::PartitionShape {
            partition: col_part.n_units(),
            axis: w.ncols(),
        });
    }
    Ok(matrix_residual(w, row_part, col_part).report(tol))
}

pub fn matrix_residual(w: &Mat, row_part: &Partition, col_part: &Partition) -> ManifoldResidual {
    let mut acc = ManifoldResidual::default();
    for rows in row_part.blocks() {
        for cols in col_part.blocks() {
            acc.fold(pair_residual(rows, cols, &|r, c| w[(r, c)]));
        }
    }
    acc
}

/// Residual of a per-port parameter vector (bias, affine scale): the spread
/// within each block, relative to the block scale. A constant block is a
/// weight column from a constant input, so the deviation counts toward both
/// the RE and BC components.
fn vector_residual(v: &[f64], part: &Partition) -> ManifoldResidual {
    let mut acc = ManifoldResidual::default();
    for b in part.blocks() {
        let vals: Vec<f64> = b.iter().map(|&u| v[u]).collect();
        let denom = ABS_FLOOR.max(vals.iter().fold(0.0f64, |a, &x| a.max(x.abs())));
        let s = spread(&vals) / denom;
        acc.fold(ManifoldResidual {
            re: s,
            ce: 0.0,
            bc: s,
        });
    }
    acc
}

// ---------------------------------------------------------------------------
// CloningProfile
// ---------------------------------------------------------------------------

/// Partition of every interface of a cloned network, together with the
/// quotient (base) network and the per-interface expansion factors.
///
/// Partitions are over *ports*: channels for `[c, h, w]` interfaces,
/// features otherwise. [`CloningProfile::unit_partition`] expands channel
/// blocks over spatial positions to address activation matrices.
#[derive(Debug, Clone)]
pub struct CloningProfile {
    pub base: Network,
    pub partitions: Vec<Partition>,
    pub factors: Vec<usize>,
}

/// Serialized form: blocks as id lists per interface, plus the base
/// architecture (base parameters travel in a parameter file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileDoc {
    pub factors: Vec<usize>,
    pub interfaces: Vec<Vec<Vec<usize>>>,
    pub base_arch: crate::net::ArchDoc,
}

impl CloningProfile {
    pub fn to_doc(&self) -> ProfileDoc {
        ProfileDoc {
            factors: self.factors.clone(),
            interfaces: self
                .partitions
                .iter()
                .map(|p| p.blocks().to_vec())
                .collect(),
            base_arch: self.base.to_arch_doc(),
        }
    }

    pub fn from_doc(doc: &ProfileDoc) -> Result<Self, ManifoldError> {
        let base = Network::from_arch_doc(&doc.base_arch)?;
        let partitions = doc
            .interfaces
            .iter()
            .map(|blocks| Partition::new(blocks.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CloningProfile {
            base,
            partitions,
            factors: doc.factors.clone(),
        })
    }

    /// Partition of the flattened units of interface `iface` of `net`.
    pub fn unit_partition(&self, net: &Network, iface: usize) -> Partition {
        let shape = &net.shapes[iface];
        let spatial: usize = shape.iter().skip(1).product();
        if shape.len() == 3 {
            self.partitions[iface].expand_spatial(spatial)
        } else {
            self.partitions[iface].clone()
        }
    }

    /// Duplicate the columns of a base-input batch so each clone block
    /// carries its base port's value.
    pub fn lift_input(&self, x_base: &Mat) -> Mat {
        let part = &self.partitions[0];
        let mut out = Mat::zeros(x_base.nrows(), part.n_units());
        for (bi, block) in part.blocks().iter().enumerate() {
            for &u in block {
                for s in 0..x_base.nrows() {
                    out[(s, u)] = x_base[(s, bi)];
                }
            }
        }
        out
    }

    /// Identity profile: every port its own block, base = the network itself.
    pub fn identity(net: &Network) -> Self {
        let partitions = (0..net.num_interfaces())
            .map(|i| {
                let shape = &net.shapes[i];
                let ports = if shape.len() == 3 {
                    shape[0]
                } else {
                    net.interface_width(i)
                };
                Partition::singletons(ports)
            })
            .collect();
        CloningProfile {
            base: net.clone(),
            partitions,
            factors: vec![1; net.num_interfaces()],
        }
    }
}

/// Manifold residual of a whole network's trainable parameters under a
/// profile. Batch-norm running statistics are non-trainable state and are
/// excluded.
pub fn network_residual(net: &Network, profile: &CloningProfile) -> ManifoldResidual {
    let mut acc = ManifoldResidual::default();
    for (m, module) in net.modules.iter().enumerate() {
        let in_iface = module.inputs[0];
        let out_iface = m + 1;
        match &module.kind {
            ModuleKind::Linear(l) => {
                let rows = profile.unit_partition(net, out_iface);
                let cols = profile.unit_partition(net, in_iface);
                acc.fold(matrix_residual(&l.weight, &rows, &cols));
                acc.fold(vector_residual(l.bias.as_slice(), &rows));
            }
            ModuleKind::Conv2d(c) => {
                let rows = &profile.partitions[out_iface];
                let cols = &profile.partitions[in_iface];
                for ky in 0..c.k {
                    for kx in 0..c.k {
                        for rb in rows.blocks() {
                            for cb in cols.blocks() {
                                acc.fold(pair_residual(rb, cb, &|co, ci| c.w(co, ci, ky, kx)));
                            }
                        }
                    }
                }
                acc.fold(vector_residual(&c.bias, rows));
            }
            ModuleKind::BatchNorm(bn) => {
                let part = &profile.partitions[out_iface];
                acc.fold(vector_residual(&bn.gamma, part));
                acc.fold(vector_residual(&bn.beta, part));
            }
            ModuleKind::LayerNorm(ln) => {
                let part = profile.unit_partition(net, out_iface);
                acc.fold(vector_residual(&ln.gamma, &part));
                acc.fold(vector_residual(&ln.beta, &part));
            }
            _ => {}
        }
    }
    acc
}

/// BC residual of the parameter drift `net_now - net_at_start`: membership
/// in the affine family requires the drift, not the point, to be
/// block-constant.
pub fn drift_residual(
    now: &Network,
    start_params: &[f64],
    profile: &CloningProfile,
) -> Result<f64, ManifoldError> {
    let mut diff = now.clone();
    let params: Vec<f64> = now
        .params_flat()
        .iter()
        .zip(start_params)
        .map(|(a, b)| a - b)
        .collect();
    diff.set_params_flat(&params)?;
    Ok(network_residual(&diff, profile).bc)
}

/// Groups of flat-parameter indices tied together by the profile: one group
/// per inter-block weight submatrix and one per block of a per-port vector
/// (bias, affine scale). Block-constancy of the parameters is constancy
/// within each group; the manifold's normal space at a point is spanned by
/// zero-sum vectors inside each group.
pub fn param_block_groups(net: &Network, profile: &CloningProfile) -> Vec<Vec<usize>> {
    let layout = net.param_layout();
    let mut groups = Vec::new();
    for entry in &layout.entries {
        let m = entry.module;
        let module = &net.modules[m];
        let in_iface = module.inputs[0];
        let out_iface = m + 1;
        match (&module.kind, entry.name.ends_with("weight")) {
            (ModuleKind::Linear(l), true) => {
                let rows = profile.unit_partition(net, out_iface);
                let cols = profile.unit_partition(net, in_iface);
                let ncols = l.weight.ncols();
                for rb in rows.blocks() {
                    for cb in cols.blocks() {
                        groups.push(
                            rb.iter()
                                .flat_map(|&r| cb.iter().map(move |&c| entry.offset + r * ncols + c))
                                .collect(),
                        );
                    }
                }
            }
            (ModuleKind::Conv2d(c), true) => {
                let rows = &profile.partitions[out_iface];
                let cols = &profile.partitions[in_iface];
                for rb in rows.blocks() {
                    for cb in cols.blocks() {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                groups.push(
                                    rb.iter()
                                        .flat_map(|&co| {
                                            cb.iter().map(move |&ci| {
                                                entry.offset
                                                    + ((co * c.c_in + ci) * c.k + ky) * c.k
                                                    + kx
                                            })
                                        })
                                        .collect(),
                                );
                            }
                        }
                    }
                }
            }
            (ModuleKind::Linear(_), false) | (ModuleKind::Conv2d(_), false) => {
                let part = if matches!(module.kind, ModuleKind::Conv2d(_)) {
                    profile.partitions[out_iface].clone()
                } else {
                    profile.unit_partition(net, out_iface)
                };
                for b in part.blocks() {
                    groups.push(b.iter().map(|&u| entry.offset + u).collect());
                }
            }
            (ModuleKind::BatchNorm(_), _) => {
                for b in profile.partitions[out_iface].blocks() {
                    groups.push(b.iter().map(|&u| entry.offset + u).collect());
                }
            }
            (ModuleKind::LayerNorm(_), _) => {
                for b in profile.unit_partition(net, out_iface).blocks() {
                    groups.push(b.iter().map(|&u| entry.offset + u).collect());
                }
            }
            _ => {}
        }
    }
    groups
}

#[cfg(test)]
mod tests;
