//! Typed modules and their forward/backward kernels.

use super::{Mode, NetError};
use crate::rng;
use crate::Mat;
use nalgebra::DVector;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Base activation functions. Gain/bias reparameterization lives in
/// [`Activation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phi", rename_all = "lowercase")]
pub enum Phi {
    Identity,
    Relu,
    Tanh,
    Gelu,
    PRelu { alpha: f64 },
}

impl Phi {
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Phi::Identity => z,
            Phi::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Phi::Tanh => z.tanh(),
            // Exact Gaussian-CDF form, z * Phi(z).
            Phi::Gelu => z * 0.5 * (1.0 + libm::erf(z / SQRT_2)),
            Phi::PRelu { alpha } => {
                if z > 0.0 {
                    z
                } else {
                    alpha * z
                }
            }
        }
    }

    pub fn deriv(&self, z: f64) -> f64 {
        match self {
            Phi::Identity => 1.0,
            Phi::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Phi::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Phi::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(z / SQRT_2));
                cdf + z * INV_SQRT_2PI * (-0.5 * z * z).exp()
            }
            Phi::PRelu { alpha } => {
                if z > 0.0 {
                    1.0
                } else {
                    *alpha
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Phi::Identity => "identity",
            Phi::Relu => "relu",
            Phi::Tanh => "tanh",
            Phi::Gelu => "gelu",
            Phi::PRelu { .. } => "prelu",
        }
    }
}

/// Elementwise activation in an operating regime: `f(z) = phi(gain*z + bias)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    #[serde(flatten)]
    pub phi: Phi,
    pub gain: f64,
    pub bias: f64,
}

impl Activation {
    pub fn new(phi: Phi) -> Self {
        Activation {
            phi,
            gain: 1.0,
            bias: 0.0,
        }
    }

    pub fn with_regime(phi: Phi, gain: f64, bias: f64) -> Self {
        Activation { phi, gain, bias }
    }

    pub fn eval(&self, z: f64) -> f64 {
        self.phi.eval(self.gain * z + self.bias)
    }

    /// Derivative with respect to the pre-activation `z` (chain rule through
    /// the gain). Exactly 0 wherever the base derivative is 0.
    pub fn deriv(&self, z: f64) -> f64 {
        self.gain * self.phi.deriv(self.gain * z + self.bias)
    }

    /// Derivative of the base function at the shifted point, without the
    /// gain factor. This is the saturation signal used by regime tables.
    pub fn base_deriv(&self, z: f64) -> f64 {
        self.phi.deriv(self.gain * z + self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// out x in.
    pub weight: Mat,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// Flat (c_out, c_in, k, k), row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    /// Input spatial dims, fixed at wiring time.
    pub in_h: usize,
    pub in_w: usize,
}

impl Conv2d {
    pub fn w(&self, co: usize, ci: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((co * self.c_in + ci) * self.k + ky) * self.k + kx]
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (
            self.in_h + 2 * self.pad + 1 - self.k,
            self.in_w + 2 * self.pad + 1 - self.k,
        )
    }
}

/// Normalizes per channel (for `[c, h, w]` inputs) or per feature (flat
/// inputs) over the batch. Running statistics are updated outside the
/// forward pass via [`super::update_running_stats`].
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Normalizes each sample across all features of its interface.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(features: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            eps: 1e-5,
        }
    }
}

/// Inverted dropout: train-time scaling by `1/(1-p)`, eval is the identity.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

#[derive(Debug, Clone)]
pub enum ModuleKind {
    Linear(Linear),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    LayerNorm(LayerNorm),
    Activation(Activation),
    Dropout(Dropout),
    ResidualAdd,
    Flatten,
    SoftmaxOutput,
}

/// State captured by a forward pass that the backward pass (or the running
/// statistics update) needs.
#[derive(Debug, Clone)]
pub enum ModuleCtx {
    None,
    Dropout {
        /// 0 where dropped, `1/(1-p)` where kept.
        mask: Mat,
    },
    BatchNorm {
        mean: Vec<f64>,
        /// Biased variance used for normalization.
        var: Vec<f64>,
        /// Unbiased variance for the running-statistics update.
        var_unbiased: Vec<f64>,
    },
    LayerNorm {
        mean: Vec<f64>,
        var: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub enum ModuleGrads {
    None,
    Linear { weight: Mat, bias: DVector<f64> },
    Conv2d { weight: Vec<f64>, bias: Vec<f64> },
    Affine { gamma: Vec<f64>, beta: Vec<f64> },
}

impl ModuleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModuleKind::Linear(_) => "linear",
            ModuleKind::Conv2d(_) => "conv2d",
            ModuleKind::BatchNorm(_) => "batchnorm",
            ModuleKind::LayerNorm(_) => "layernorm",
            ModuleKind::Activation(_) => "activation",
            ModuleKind::Dropout(_) => "dropout",
            ModuleKind::ResidualAdd => "residual-add",
            ModuleKind::Flatten => "flatten",
            ModuleKind::SoftmaxOutput => "softmax-output",
        }
    }

    /// Output shape for the given input shapes, or a structured error when
    /// the wiring is inconsistent.
    pub fn out_shape(&self, idx: usize, in_shapes: &[&[usize]]) -> Result<Vec<usize>, NetError> {
        let bad = |message: String| NetError::BadModule {
            module: idx,
            kind: self.name().to_string(),
            message,
        };
        let single = || -> Result<&[usize], NetError> {
            if in_shapes.len() != 1 {
                return Err(bad(format!("expects 1 input, wired to {}", in_shapes.len())));
            }
            Ok(in_shapes[0])
        };
        match self {
            ModuleKind::Linear(l) => {
                let s = single()?;
                let width: usize = s.iter().product();
                if width != l.weight.ncols() {
                    return Err(bad(format!(
                        "weight expects {} inputs, interface has {width}",
                        l.weight.ncols()
                    )));
                }
                if l.bias.len() != l.weight.nrows() {
                    return Err(bad("bias length differs from weight rows".into()));
                }
                Ok(vec![l.weight.nrows()])
            }
            ModuleKind::Conv2d(c) => {
                let s = single()?;
                if s.len() != 3 || s[0] != c.c_in || s[1] != c.in_h || s[2] != c.in_w {
                    return Err(bad(format!(
                        "expects [{}, {}, {}] input, got {s:?}",
                        c.c_in, c.in_h, c.in_w
                    )));
                }
                if s[1] + 2 * c.pad < c.k || s[2] + 2 * c.pad < c.k {
                    return Err(bad("kernel larger than padded input".into()));
                }
                let (oh, ow) = c.out_hw();
                Ok(vec![c.c_out, oh, ow])
            }
            ModuleKind::BatchNorm(bn) => {
                let s = single()?;
                let groups = s[0];
                if bn.gamma.len() != groups {
                    return Err(bad(format!(
                        "affine parameters cover {} groups, interface has {groups}",
                        bn.gamma.len()
                    )));
                }
                Ok(s.to_vec())
            }
            ModuleKind::LayerNorm(ln) => {
                let s = single()?;
                let width: usize = s.iter().product();
                if ln.gamma.len() != width {
                    return Err(bad(format!(
                        "affine parameters cover {} features, interface has {width}",
                        ln.gamma.len()
                    )));
                }
                Ok(s.to_vec())
            }
            ModuleKind::Activation(_) | ModuleKind::SoftmaxOutput => Ok(single()?.to_vec()),
            ModuleKind::Dropout(d) => {
                if !(0.0..1.0).contains(&d.p) {
                    return Err(bad(format!("dropout probability {} not in [0, 1)", d.p)));
                }
                Ok(single()?.to_vec())
            }
            ModuleKind::ResidualAdd => {
                if in_shapes.len() != 2 {
                    return Err(bad(format!("expects 2 inputs, wired to {}", in_shapes.len())));
                }
                if in_shapes[0] != in_shapes[1] {
                    return Err(bad(format!(
                        "branch shapes differ: {:?} vs {:?}",
                        in_shapes[0], in_shapes[1]
                    )));
                }
                Ok(in_shapes[0].to_vec())
            }
            ModuleKind::Flatten => {
                let s = single()?;
                Ok(vec![s.iter().product()])
            }
        }
    }

    pub fn forward(
        &self,
        idx: usize,
        ins: &[&Mat],
        mode: Mode,
        seed: u64,
    ) -> Result<(Mat, ModuleCtx), NetError> {
        let x = ins[0];
        let n = x.nrows();
        match self {
            ModuleKind::Linear(l) => {
                if x.ncols() != l.weight.ncols() {
                    return Err(NetError::ShapeMismatch {
                        module: idx,
                        kind: "linear".into(),
                        expected: l.weight.ncols(),
                        got: x.ncols(),
                    });
                }
                let mut out = x * l.weight.transpose();
                for mut row in out.row_iter_mut() {
                    row += l.bias.transpose();
                }
                Ok((out, ModuleCtx::None))
            }
            ModuleKind::Conv2d(c) => Ok((conv_forward(c, x, idx)?, ModuleCtx::None)),
            ModuleKind::BatchNorm(bn) => batchnorm_forward(bn, x, mode),
            ModuleKind::LayerNorm(ln) => layernorm_forward(ln, x),
            ModuleKind::Activation(act) => Ok((x.map(|z| act.eval(z)), ModuleCtx::None)),
            ModuleKind::Dropout(d) => {
                if mode == Mode::Eval || d.p == 0.0 {
                    return Ok((x.clone(), ModuleCtx::None));
                }
                let mut r = rng::seeded(seed);
                let scale = 1.0 / (1.0 - d.p);
                let mask = Mat::from_fn(n, x.ncols(), |_, _| {
                    if r.gen::<f64>() < d.p {
                        0.0
                    } else {
                        scale
                    }
                });
                Ok((x.component_mul(&mask), ModuleCtx::Dropout { mask }))
            }
            ModuleKind::ResidualAdd => Ok((ins[0] + ins[1], ModuleCtx::None)),
            ModuleKind::Flatten => Ok((x.clone(), ModuleCtx::None)),
            ModuleKind::SoftmaxOutput => {
                let mut out = x.clone();
                for mut row in out.row_iter_mut() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    row /= sum;
                }
                Ok((out, ModuleCtx::None))
            }
        }
    }

    /// Input adjoints and parameter gradients given the output adjoint
    /// `dout = ∂L/∂out`, summed over the batch.
    pub fn backward(
        &self,
        ins: &[&Mat],
        out: &Mat,
        ctx: &ModuleCtx,
        dout: &Mat,
        mode: Mode,
    ) -> (Vec<Mat>, ModuleGrads) {
        let x = ins[0];
        match self {
            ModuleKind::Linear(l) => {
                let dw = dout.transpose() * x;
                let db = DVector::from_fn(l.bias.len(), |j, _| dout.column(j).sum());
                let din = dout * &l.weight;
                (vec![din], ModuleGrads::Linear { weight: dw, bias: db })
            }
            ModuleKind::Conv2d(c) => conv_backward(c, x, dout),
            ModuleKind::BatchNorm(bn) => batchnorm_backward(bn, x, ctx, dout, mode),
            ModuleKind::LayerNorm(ln) => layernorm_backward(ln, x, ctx, dout),
            ModuleKind::Activation(act) => {
                let din = Mat::from_fn(x.nrows(), x.ncols(), |i, j| dout[(i, j)] * act.deriv(x[(i, j)]));
                (vec![din], ModuleGrads::None)
            }
            ModuleKind::Dropout(_) => match ctx {
                ModuleCtx::Dropout { mask } => (vec![dout.component_mul(mask)], ModuleGrads::None),
                _ => (vec![dout.clone()], ModuleGrads::None),
            },
            ModuleKind::ResidualAdd => (vec![dout.clone(), dout.clone()], ModuleGrads::None),
            ModuleKind::Flatten => (vec![dout.clone()], ModuleGrads::None),
            ModuleKind::SoftmaxOutput => {
                let mut din = Mat::zeros(out.nrows(), out.ncols());
                for s in 0..out.nrows() {
                    let dot: f64 = (0..out.ncols()).map(|j| dout[(s, j)] * out[(s, j)]).sum();
                    for j in 0..out.ncols() {
                        din[(s, j)] = out[(s, j)] * (dout[(s, j)] - dot);
                    }
                }
                (vec![din], ModuleGrads::None)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

fn conv_forward(c: &Conv2d, x: &Mat, idx: usize) -> Result<Mat, NetError> {
    let (h, w) = (c.in_h, c.in_w);
    if x.ncols() != c.c_in * h * w {
        return Err(NetError::ShapeMismatch {
            module: idx,
            kind: "conv2d".into(),
            expected: c.c_in * h * w,
            got: x.ncols(),
        });
    }
    let (oh, ow) = c.out_hw();
    let n = x.nrows();
    let mut out = Mat::zeros(n, c.c_out * oh * ow);
    let p = c.pad as isize;
    for s in 0..n {
        for co in 0..c.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias[co];
                    for ci in 0..c.c_in {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let iy = oy as isize + ky as isize - p;
                                let ix = ox as isize + kx as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let col = (ci * h + iy as usize) * w + ix as usize;
                                acc += c.w(co, ci, ky, kx) * x[(s, col)];
                            }
                        }
                    }
                    out[(s, (co * oh + oy) * ow + ox)] = acc;
                }
            }
        }
    }
    Ok(out)
}

fn conv_backward(c: &Conv2d, x: &Mat, dout: &Mat) -> (Vec<Mat>, ModuleGrads) {
    let (h, w) = (c.in_h, c.in_w);
    let (oh, ow) = c.out_hw();
    let n = x.nrows();
    let p = c.pad as isize;
    let mut din = Mat::zeros(n, x.ncols());
    let mut dw = vec![0.0; c.weight.len()];
    let mut db = vec![0.0; c.c_out];
    for s in 0..n {
        for co in 0..c.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dout[(s, (co * oh + oy) * ow + ox)];
                    if g == 0.0 {
                        continue;
                    }
                    db[co] += g;
                    for ci in 0..c.c_in {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let iy = oy as isize + ky as isize - p;
                                let ix = ox as isize + kx as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let col = (ci * h + iy as usize) * w + ix as usize;
                                dw[((co * c.c_in + ci) * c.k + ky) * c.k + kx] += g * x[(s, col)];
                                din[(s, col)] += g * c.w(co, ci, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![din], ModuleGrads::Conv2d { weight: dw, bias: db })
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Map a column index to its normalization group (channel for spatial
/// interfaces, the feature itself for flat ones).
fn group_of(col: usize, cols: usize, groups: usize) -> usize {
    col / (cols / groups)
}

fn batchnorm_forward(bn: &BatchNorm, x: &Mat, mode: Mode) -> Result<(Mat, ModuleCtx), NetError> {
    let groups = bn.gamma.len();
    let cols = x.ncols();
    let n = x.nrows();
    if mode == Mode::Eval {
        let out = Mat::from_fn(n, cols, |i, j| {
            let g = group_of(j, cols, groups);
            let xhat = (x[(i, j)] - bn.running_mean[g]) / (bn.running_var[g] + bn.eps).sqrt();
            bn.gamma[g] * xhat + bn.beta[g]
        });
        return Ok((out, ModuleCtx::None));
    }
    let per_group = cols / groups;
    let m = (n * per_group) as f64;
    let mut mean = vec![0.0; groups];
    let mut var = vec![0.0; groups];
    for j in 0..cols {
        let g = group_of(j, cols, groups);
        for i in 0..n {
            mean[g] += x[(i, j)];
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for j in 0..cols {
        let g = group_of(j, cols, groups);
        for i in 0..n {
            let d = x[(i, j)] - mean[g];
            var[g] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    let var_unbiased: Vec<f64> = var.iter().map(|&v| v * m / (m - 1.0).max(1.0)).collect();
    let out = Mat::from_fn(n, cols, |i, j| {
        let g = group_of(j, cols, groups);
        let xhat = (x[(i, j)] - mean[g]) / (var[g] + bn.eps).sqrt();
        bn.gamma[g] * xhat + bn.beta[g]
    });
    Ok((
        out,
        ModuleCtx::BatchNorm {
            mean,
            var,
            var_unbiased,
        },
    ))
}

fn batchnorm_backward(
    bn: &BatchNorm,
    x: &Mat,
    ctx: &ModuleCtx,
    dout: &Mat,
    mode: Mode,
) -> (Vec<Mat>, ModuleGrads) {
    let groups = bn.gamma.len();
    let cols = x.ncols();
    let n = x.nrows();
    if mode == Mode::Eval {
        // Running statistics are constants; the map is affine per group.
        let mut dgamma = vec![0.0; groups];
        let mut dbeta = vec![0.0; groups];
        let mut din = Mat::zeros(n, cols);
        for j in 0..cols {
            let g = group_of(j, cols, groups);
            let s = (bn.running_var[g] + bn.eps).sqrt();
            for i in 0..n {
                let xhat = (x[(i, j)] - bn.running_mean[g]) / s;
                dgamma[g] += dout[(i, j)] * xhat;
                dbeta[g] += dout[(i, j)];
                din[(i, j)] = dout[(i, j)] * bn.gamma[g] / s;
            }
        }
        return (
            vec![din],
            ModuleGrads::Affine {
                gamma: dgamma,
                beta: dbeta,
            },
        );
    }
    let ModuleCtx::BatchNorm { mean, var, .. } = ctx else {
        panic!("batchnorm backward without batch statistics");
    };
    let per_group = cols / groups;
    let m = (n * per_group) as f64;
    let mut dgamma = vec![0.0; groups];
    let mut dbeta = vec![0.0; groups];
    for j in 0..cols {
        let g = group_of(j, cols, groups);
        let s = (var[g] + bn.eps).sqrt();
        for i in 0..n {
            let xhat = (x[(i, j)] - mean[g]) / s;
            dgamma[g] += dout[(i, j)] * xhat;
            dbeta[g] += dout[(i, j)];
        }
    }
    let mut din = Mat::zeros(n, cols);
    for j in 0..cols {
        let g = group_of(j, cols, groups);
        let s = (var[g] + bn.eps).sqrt();
        for i in 0..n {
            let xhat = (x[(i, j)] - mean[g]) / s;
            din[(i, j)] =
                bn.gamma[g] / s * (dout[(i, j)] - dbeta[g] / m - xhat * dgamma[g] / m);
        }
    }
    (
        vec![din],
        ModuleGrads::Affine {
            gamma: dgamma,
            beta: dbeta,
        },
    )
}

fn layernorm_forward(ln: &LayerNorm, x: &Mat) -> Result<(Mat, ModuleCtx), NetError> {
    let n = x.nrows();
    let cols = x.ncols();
    let m = cols as f64;
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    for i in 0..n {
        let mu: f64 = x.row(i).sum() / m;
        let v: f64 = x.row(i).iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / m;
        mean[i] = mu;
        var[i] = v;
    }
    let out = Mat::from_fn(n, cols, |i, j| {
        let xhat = (x[(i, j)] - mean[i]) / (var[i] + ln.eps).sqrt();
        ln.gamma[j] * xhat + ln.beta[j]
    });
    Ok((out, ModuleCtx::LayerNorm { mean, var }))
}

fn layernorm_backward(
    ln: &LayerNorm,
    x: &Mat,
    ctx: &ModuleCtx,
    dout: &Mat,
) -> (Vec<Mat>, ModuleGrads) {
    let ModuleCtx::LayerNorm { mean, var } = ctx else {
        panic!("layernorm backward without statistics");
    };
    let n = x.nrows();
    let cols = x.ncols();
    let m = cols as f64;
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    let mut din = Mat::zeros(n, cols);
    for i in 0..n {
        let s = (var[i] + ln.eps).sqrt();
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..cols {
            let xhat = (x[(i, j)] - mean[i]) / s;
            let g = dout[(i, j)] * ln.gamma[j];
            dgamma[j] += dout[(i, j)] * xhat;
            dbeta[j] += dout[(i, j)];
            mean_g += g;
            mean_gx += g * xhat;
        }
        mean_g /= m;
        mean_gx /= m;
        for j in 0..cols {
            let xhat = (x[(i, j)] - mean[i]) / s;
            let g = dout[(i, j)] * ln.gamma[j];
            din[(i, j)] = (g - mean_g - xhat * mean_gx) / s;
        }
    }
    (
        vec![din],
        ModuleGrads::Affine {
            gamma: dgamma,
            beta: dbeta,
        },
    )
}
