//! Seeded random architecture sampler covering every supported module kind.
//! Drives the gradient-oracle checks in tests and the `verify` CLI path.

use super::module::Phi;
use super::{Loss, Network};
use crate::rng;
use crate::Mat;
use rand::Rng as _;

/// A sampled architecture plus a batch it can consume.
pub struct RandomCase {
    pub net: Network,
    pub x: Mat,
    pub target: Mat,
    pub loss: Loss,
}

fn pick_phi(r: &mut rng::Rng) -> Phi {
    match r.gen_range(0..5) {
        0 => Phi::Relu,
        1 => Phi::Tanh,
        2 => Phi::Gelu,
        3 => Phi::Identity,
        _ => Phi::PRelu { alpha: 0.1 },
    }
}

/// Draw a small network mixing linear/conv2d/batchnorm/layernorm/activation/
/// dropout/residual-add/flatten/softmax-output modules, together with a
/// compatible random batch and loss.
pub fn random_network(seed: u64) -> RandomCase {
    let mut r = rng::seeded(seed);
    let batch = r.gen_range(3..6);
    let conv_front = r.gen_bool(0.5);

    let mut b;
    let x;
    if conv_front {
        let c = r.gen_range(1..3usize);
        let hw = r.gen_range(4..6usize);
        b = Network::builder(&[c, hw, hw]);
        x = Mat::from_fn(batch, c * hw * hw, |_, _| r.gen_range(-1.0..1.0));
        let c_out = r.gen_range(2..4usize);
        let k = r.gen_range(2..4usize);
        b = b.conv2d(c_out, k, 1, &mut r);
        if r.gen_bool(0.5) {
            b = b.batchnorm();
        }
        b = b.activation_regime(pick_phi(&mut r), r.gen_range(0.6..1.4), r.gen_range(-0.3..0.3));
        b = b.flatten();
    } else {
        let d = r.gen_range(2..6usize);
        b = Network::builder(&[d]);
        x = Mat::from_fn(batch, d, |_, _| r.gen_range(-1.0..1.0));
    }

    let blocks = r.gen_range(1..3usize);
    for _ in 0..blocks {
        let w = r.gen_range(3..7usize);
        b = b.linear(w, &mut r);
        match r.gen_range(0..3) {
            0 => b = b.batchnorm(),
            1 => b = b.layernorm(),
            _ => {}
        }
        b = b.activation_regime(pick_phi(&mut r), r.gen_range(0.6..1.4), r.gen_range(-0.3..0.3));
        if r.gen_bool(0.3) {
            b = b.dropout(0.2);
        }
        if r.gen_bool(0.4) {
            // Width-preserving branch closed by a residual add.
            let skip = b.last_interface();
            b = b.linear(w, &mut r);
            b = b.activation(pick_phi(&mut r));
            b = b.residual_add(skip);
        }
    }

    let out = r.gen_range(2..4usize);
    b = b.linear(out, &mut r);
    let (loss, target) = if r.gen_bool(0.5) {
        b = b.softmax_output();
        let mut t = Mat::zeros(batch, out);
        for s in 0..batch {
            t[(s, r.gen_range(0..out))] = 1.0;
        }
        (Loss::CrossEntropy, t)
    } else {
        (
            Loss::Mse,
            Mat::from_fn(batch, out, |_, _| r.gen_range(-1.0..1.0)),
        )
    };
    let net = b.build().expect("sampled architecture is shape-consistent");
    RandomCase { net, x, target, loss }
}
