//! Chain-style network construction with shape validation at every step.

use super::module::{Activation, BatchNorm, Conv2d, Dropout, LayerNorm, Linear, ModuleKind, Phi};
use super::{Module, NetError, Network};
use crate::rng::Rng;
use crate::Mat;
use nalgebra::DVector;
use rand::Rng as _;

pub struct NetworkBuilder {
    input_shape: Vec<usize>,
    modules: Vec<Module>,
    shapes: Vec<Vec<usize>>,
    error: Option<NetError>,
}

impl NetworkBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        NetworkBuilder {
            input_shape: input_shape.to_vec(),
            modules: Vec::new(),
            shapes: vec![input_shape.to_vec()],
            error: None,
        }
    }

    /// Interface id of the most recently added module's output (0 = input).
    pub fn last_interface(&self) -> usize {
        self.modules.len()
    }

    pub fn current_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    fn push(mut self, kind: ModuleKind, inputs: Vec<usize>) -> Self {
        if self.error.is_some() {
            return self;
        }
        let idx = self.modules.len();
        let in_shapes: Vec<&[usize]> = inputs.iter().map(|&p| self.shapes[p].as_slice()).collect();
        match kind.out_shape(idx, &in_shapes) {
            Ok(shape) => {
                self.shapes.push(shape);
                self.modules.push(Module { kind, inputs });
            }
            Err(e) => self.error = Some(e),
        }
        self
    }

    fn chain(self, kind: ModuleKind) -> Self {
        let last = self.last_interface();
        self.push(kind, vec![last])
    }

    /// Fully-connected layer with Kaiming-uniform weights and zero bias.
    pub fn linear(self, out: usize, rng: &mut Rng) -> Self {
        let fan_in: usize = self.current_shape().iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Mat::from_fn(out, fan_in, |_, _| rng.gen_range(-bound..bound));
        self.linear_from(weight, DVector::zeros(out))
    }

    pub fn linear_from(self, weight: Mat, bias: DVector<f64>) -> Self {
        self.chain(ModuleKind::Linear(Linear { weight, bias }))
    }

    pub fn conv2d(self, c_out: usize, k: usize, pad: usize, rng: &mut Rng) -> Self {
        let shape = self.current_shape().to_vec();
        if shape.len() != 3 {
            // Let out_shape produce the structured error.
            let conv = Conv2d {
                weight: vec![],
                bias: vec![],
                c_in: 0,
                c_out,
                k,
                pad,
                in_h: 0,
                in_w: 0,
            };
            return self.chain(ModuleKind::Conv2d(conv));
        }
        let (c_in, h, w) = (shape[0], shape[1], shape[2]);
        let fan_in = c_in * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..c_out * c_in * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.chain(ModuleKind::Conv2d(Conv2d {
            weight,
            bias: vec![0.0; c_out],
            c_in,
            c_out,
            k,
            pad,
            in_h: h,
            in_w: w,
        }))
    }

    pub fn batchnorm(self) -> Self {
        let groups = self.current_shape()[0];
        self.chain(ModuleKind::BatchNorm(BatchNorm::new(groups)))
    }

    pub fn layernorm(self) -> Self {
        let width: usize = self.current_shape().iter().product();
        self.chain(ModuleKind::LayerNorm(LayerNorm::new(width)))
    }

    pub fn activation(self, phi: Phi) -> Self {
        self.chain(ModuleKind::Activation(Activation::new(phi)))
    }

    pub fn activation_regime(self, phi: Phi, gain: f64, bias: f64) -> Self {
        self.chain(ModuleKind::Activation(Activation::with_regime(phi, gain, bias)))
    }

    pub fn dropout(self, p: f64) -> Self {
        self.chain(ModuleKind::Dropout(Dropout { p }))
    }

    pub fn flatten(self) -> Self {
        self.chain(ModuleKind::Flatten)
    }

    pub fn softmax_output(self) -> Self {
        self.chain(ModuleKind::SoftmaxOutput)
    }

    /// Adds `out = last + interfaces[skip]`.
    pub fn residual_add(self, skip: usize) -> Self {
        let last = self.last_interface();
        self.push(ModuleKind::ResidualAdd, vec![last, skip])
    }

    pub fn build(self) -> Result<Network, NetError> {
        if let Some(e) = self.error {
            return Err(e);
        }
        Ok(Network {
            input_shape: self.input_shape,
            modules: self.modules,
            shapes: self.shapes,
        })
    }
}

impl Network {
    pub fn builder(input_shape: &[usize]) -> NetworkBuilder {
        NetworkBuilder::new(input_shape)
    }

    /// Plain MLP: `input -> [linear -> act]* -> linear`, widths given in
    /// order, last width is the output.
    pub fn mlp(input: usize, widths: &[usize], act: Activation, rng: &mut Rng) -> Network {
        let mut b = Network::builder(&[input]);
        for (i, &w) in widths.iter().enumerate() {
            b = b.linear(w, rng);
            if i + 1 < widths.len() {
                b = b.chain(ModuleKind::Activation(act));
            }
        }
        b.build().expect("mlp shapes are consistent by construction")
    }
}
