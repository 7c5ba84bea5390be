//! Cloning operators: expand a base network onto the block-constant
//! manifold, redistribute within blocks to reach general RE∩CE points, and
//! collapse a network on the manifold back to its quotient.

use super::{
    network_residual, pairwise_sum, CloningProfile, ManifoldError, Partition, MEMBERSHIP_TOL,
};
use crate::net::{BatchNorm, Conv2d, LayerNorm, Linear, Module, ModuleKind, Network};
use crate::rng;
use crate::Mat;
use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::StandardNormal;

/// Validate per-interface factors against the module wiring and build the
/// port partitions they induce, chaining partitions through port-preserving
/// modules so adjacent interfaces always match.
fn induce_partitions(
    base: &Network,
    factors: &[usize],
) -> Result<Vec<Partition>, ManifoldError> {
    if factors.len() != base.num_interfaces() {
        return Err(ManifoldError::FactorCount {
            expected: base.num_interfaces(),
            got: factors.len(),
        });
    }
    if factors.contains(&0) {
        return Err(ManifoldError::ZeroFactor);
    }
    let ports = |iface: usize| -> usize {
        let shape = &base.shapes[iface];
        if shape.len() == 3 {
            shape[0]
        } else {
            base.interface_width(iface)
        }
    };
    let mut partitions: Vec<Partition> = vec![Partition::uniform(ports(0), factors[0])];
    for (m, module) in base.modules.iter().enumerate() {
        let out = m + 1;
        let require_match = |p: usize| -> Result<(), ManifoldError> {
            if factors[p] != factors[out] {
                Err(ManifoldError::InconsistentFactors {
                    iface: out,
                    got: factors[out],
                    expected: factors[p],
                    module: m,
                })
            } else {
                Ok(())
            }
        };
        let part = match &module.kind {
            // Width-changing modules start a fresh uniform partition.
            ModuleKind::Linear(_) | ModuleKind::Conv2d(_) => {
                Partition::uniform(ports(out), factors[out])
            }
            ModuleKind::Flatten => {
                require_match(module.inputs[0])?;
                let in_shape = &base.shapes[module.inputs[0]];
                let spatial: usize = in_shape.iter().skip(1).product();
                partitions[module.inputs[0]].expand_spatial(spatial)
            }
            ModuleKind::ResidualAdd => {
                require_match(module.inputs[0])?;
                require_match(module.inputs[1])?;
                if partitions[module.inputs[0]] != partitions[module.inputs[1]] {
                    return Err(ManifoldError::InconsistentFactors {
                        iface: out,
                        got: factors[module.inputs[0]],
                        expected: factors[module.inputs[1]],
                        module: m,
                    });
                }
                partitions[module.inputs[0]].clone()
            }
            // Port-preserving elementwise/normalization modules carry the
            // profile through unchanged.
            _ => {
                require_match(module.inputs[0])?;
                partitions[module.inputs[0]].clone()
            }
        };
        partitions.push(part);
    }
    Ok(partitions)
}

/// Unit-level partition of an interface, given the port partitions and the
/// base interface shapes (spatial dims are unchanged by cloning).
fn unit_partition_of(partitions: &[Partition], base_shapes: &[Vec<usize>], iface: usize) -> Partition {
    let shape = &base_shapes[iface];
    if shape.len() == 3 {
        let spatial: usize = shape.iter().skip(1).product();
        partitions[iface].expand_spatial(spatial)
    } else {
        partitions[iface].clone()
    }
}

/// Expand `base` by the given per-interface factors onto the block-constant
/// manifold.
///
/// Linear and conv weights tile with a `1/factor_in` scale so every clone
/// block reproduces its base port; biases and affine parameters duplicate;
/// batch-norm running statistics duplicate per clone. Units within a block
/// are bitwise identical on any input; block values match the base network
/// to accumulation accuracy (exactly, for power-of-two factors).
pub fn clone_network(
    base: &Network,
    factors: &[usize],
) -> Result<(Network, CloningProfile), ManifoldError> {
    let partitions = induce_partitions(base, factors)?;
    let mut modules = Vec::with_capacity(base.modules.len());
    for (m, module) in base.modules.iter().enumerate() {
        let in_iface = module.inputs[0];
        let out_iface = m + 1;
        let (f_in, f_out) = (factors[in_iface], factors[out_iface]);
        let kind = match &module.kind {
            ModuleKind::Linear(l) => {
                let scale = 1.0 / f_in as f64;
                let row_map = unit_partition_of(&partitions, &base.shapes, out_iface).block_of();
                let col_map = unit_partition_of(&partitions, &base.shapes, in_iface).block_of();
                let weight = Mat::from_fn(row_map.len(), col_map.len(), |v, u| {
                    l.weight[(row_map[v], col_map[u])] * scale
                });
                let bias = DVector::from_fn(row_map.len(), |v, _| l.bias[row_map[v]]);
                ModuleKind::Linear(Linear { weight, bias })
            }
            ModuleKind::Conv2d(c) => {
                let scale = 1.0 / f_in as f64;
                let c_in = c.c_in * f_in;
                let c_out = c.c_out * f_out;
                let mut weight = vec![0.0; c_out * c_in * c.k * c.k];
                for co in 0..c_out {
                    for ci in 0..c_in {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                weight[((co * c_in + ci) * c.k + ky) * c.k + kx] =
                                    c.w(co / f_out, ci / f_in, ky, kx) * scale;
                            }
                        }
                    }
                }
                let bias = (0..c_out).map(|co| c.bias[co / f_out]).collect();
                ModuleKind::Conv2d(Conv2d {
                    weight,
                    bias,
                    c_in,
                    c_out,
                    k: c.k,
                    pad: c.pad,
                    in_h: c.in_h,
                    in_w: c.in_w,
                })
            }
            ModuleKind::BatchNorm(bn) => {
                let f = f_out;
                let dup = |v: &[f64]| -> Vec<f64> { (0..v.len() * f).map(|u| v[u / f]).collect() };
                ModuleKind::BatchNorm(BatchNorm {
                    gamma: dup(&bn.gamma),
                    beta: dup(&bn.beta),
                    running_mean: dup(&bn.running_mean),
                    running_var: dup(&bn.running_var),
                    momentum: bn.momentum,
                    eps: bn.eps,
                })
            }
            ModuleKind::LayerNorm(ln) => {
                let unit_map = unit_partition_of(&partitions, &base.shapes, out_iface).block_of();
                ModuleKind::LayerNorm(LayerNorm {
                    gamma: unit_map.iter().map(|&b| ln.gamma[b]).collect(),
                    beta: unit_map.iter().map(|&b| ln.beta[b]).collect(),
                    eps: ln.eps,
                })
            }
            other => other.clone(),
        };
        modules.push(Module {
            kind,
            inputs: module.inputs.clone(),
        });
    }
    // Recompute interface shapes for the expanded widths.
    let mut shapes = vec![expand_shape(&base.shapes[0], factors[0])];
    for (m, module) in modules.iter().enumerate() {
        let in_shapes: Vec<&[usize]> =
            module.inputs.iter().map(|&p| shapes[p].as_slice()).collect();
        shapes.push(module.kind.out_shape(m, &in_shapes)?);
    }
    let clone = Network {
        input_shape: shapes[0].clone(),
        modules,
        shapes,
    };
    let profile = CloningProfile {
        base: base.clone(),
        partitions,
        factors: factors.to_vec(),
    };
    Ok((clone, profile))
}

fn expand_shape(shape: &[usize], factor: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[0] *= factor;
    s
}

/// Move a cloned network to a general (non-block-constant) RE∩CE point by
/// adding double-centered noise inside every inter-block weight submatrix.
/// Row and column block sums are preserved, so forward/backward cloning
/// still hold; the BC residual becomes positive.
pub fn redistribute(net: &mut Network, profile: &CloningProfile, amplitude: f64, seed: u64) {
    let unit_parts: Vec<Partition> = (0..net.num_interfaces())
        .map(|i| profile.unit_partition(net, i))
        .collect();
    let mut r = rng::seeded(seed);
    for m in 0..net.modules.len() {
        let in_iface = net.modules[m].inputs[0];
        let out_iface = m + 1;
        if let ModuleKind::Linear(l) = &mut net.modules[m].kind {
            let rows = &unit_parts[out_iface];
            let cols = &unit_parts[in_iface];
            for rb in rows.blocks() {
                for cb in cols.blocks() {
                    if rb.len() * cb.len() == 1 {
                        continue;
                    }
                    let (a, b) = (rb.len(), cb.len());
                    let g =
                        Mat::from_fn(a, b, |_, _| amplitude * r.sample::<f64, _>(StandardNormal));
                    // Double-center: rows and columns of the noise sum to 0.
                    let grand = g.sum() / (a * b) as f64;
                    let row_means: Vec<f64> = (0..a).map(|i| g.row(i).sum() / b as f64).collect();
                    let col_means: Vec<f64> =
                        (0..b).map(|j| g.column(j).sum() / a as f64).collect();
                    for (i, &u) in rb.iter().enumerate() {
                        for (j, &v) in cb.iter().enumerate() {
                            l.weight[(u, v)] += g[(i, j)] - row_means[i] - col_means[j] + grand;
                        }
                    }
                }
            }
        }
    }
}

/// Collapse a network on the RE∩CE manifold back to its base: each block
/// pair becomes one weight equal to the block total divided by the number
/// of out-block rows (the common row sum, under RE).
///
/// Refuses with the measured residuals when the parameters are off-manifold
/// beyond `tol`.
pub fn quotient_network(
    net: &Network,
    profile: &CloningProfile,
    tol: Option<f64>,
) -> Result<Network, ManifoldError> {
    let tol = tol.unwrap_or(MEMBERSHIP_TOL);
    let res = network_residual(net, profile);
    if res.re > tol || res.ce > tol {
        return Err(ManifoldError::OffManifold {
            re: res.re,
            ce: res.ce,
            tol,
        });
    }
    let block_mean = |v: &[f64], b: &[usize]| {
        pairwise_sum(&b.iter().map(|&u| v[u]).collect::<Vec<_>>()) / b.len() as f64
    };
    let mut base = profile.base.clone();
    for (m, module) in net.modules.iter().enumerate() {
        let in_iface = module.inputs[0];
        let out_iface = m + 1;
        match (&module.kind, &mut base.modules[m].kind) {
            (ModuleKind::Linear(l), ModuleKind::Linear(bl)) => {
                let rows = profile.unit_partition(net, out_iface);
                let cols = profile.unit_partition(net, in_iface);
                for (bi, rb) in rows.blocks().iter().enumerate() {
                    for (bj, cb) in cols.blocks().iter().enumerate() {
                        let row_sums: Vec<f64> = rb
                            .iter()
                            .map(|&u| {
                                pairwise_sum(
                                    &cb.iter().map(|&v| l.weight[(u, v)]).collect::<Vec<_>>(),
                                )
                            })
                            .collect();
                        bl.weight[(bi, bj)] = pairwise_sum(&row_sums) / rb.len() as f64;
                    }
                    bl.bias[bi] = block_mean(l.bias.as_slice(), rb);
                }
            }
            (ModuleKind::Conv2d(c), ModuleKind::Conv2d(bc)) => {
                let rows = &profile.partitions[out_iface];
                let cols = &profile.partitions[in_iface];
                let base_c_in = bc.c_in;
                let base_k = bc.k;
                for (bi, rb) in rows.blocks().iter().enumerate() {
                    for (bj, cb) in cols.blocks().iter().enumerate() {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let sums: Vec<f64> = rb
                                    .iter()
                                    .map(|&co| {
                                        pairwise_sum(
                                            &cb.iter()
                                                .map(|&ci| c.w(co, ci, ky, kx))
                                                .collect::<Vec<_>>(),
                                        )
                                    })
                                    .collect();
                                bc.weight[((bi * base_c_in + bj) * base_k + ky) * base_k + kx] =
                                    pairwise_sum(&sums) / rb.len() as f64;
                            }
                        }
                    }
                    bc.bias[bi] = block_mean(&c.bias, rb);
                }
            }
            (ModuleKind::BatchNorm(bn), ModuleKind::BatchNorm(bb)) => {
                let part = &profile.partitions[out_iface];
                for (bi, b) in part.blocks().iter().enumerate() {
                    bb.gamma[bi] = block_mean(&bn.gamma, b);
                    bb.beta[bi] = block_mean(&bn.beta, b);
                    bb.running_mean[bi] = block_mean(&bn.running_mean, b);
                    bb.running_var[bi] = block_mean(&bn.running_var, b);
                }
            }
            (ModuleKind::LayerNorm(ln), ModuleKind::LayerNorm(bl)) => {
                let part = profile.unit_partition(net, out_iface);
                for (bi, b) in part.blocks().iter().enumerate() {
                    bl.gamma[bi] = block_mean(&ln.gamma, b);
                    bl.beta[bi] = block_mean(&ln.beta, b);
                }
            }
            _ => {}
        }
    }
    Ok(base)
}
