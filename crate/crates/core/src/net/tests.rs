use super::*;
use crate::rng;
use nalgebra::DVector;

fn mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
    Mat::from_row_slice(rows, cols, data)
}

#[test]
fn forward_single_linear_identity() {
    // w = [1, 2], x = [3, 4] -> h = 11
    let net = Network::builder(&[2])
        .linear_from(mat(1, 2, &[1.0, 2.0]), DVector::zeros(1))
        .activation(Phi::Identity)
        .build()
        .unwrap();
    let acts = forward(&net, &mat(1, 2, &[3.0, 4.0]), Mode::Eval, 0).unwrap();
    assert_eq!(acts.output()[(0, 0)], 11.0);
}

#[test]
fn forward_relu_clamps_negative() {
    let net = Network::builder(&[1])
        .linear_from(mat(1, 1, &[1.0]), DVector::zeros(1))
        .activation(Phi::Relu)
        .build()
        .unwrap();
    let acts = forward(&net, &mat(1, 1, &[-5.0]), Mode::Eval, 0).unwrap();
    assert_eq!(acts.output()[(0, 0)], 0.0);
}

#[test]
fn forward_row_equitable_weights_clone_hidden_units() {
    // Both input units carry the same value (one clone block); the hidden
    // block's row sums agree, so the two hidden units match on any input.
    let net = Network::builder(&[2])
        .linear_from(mat(2, 2, &[1.0, 2.0, 2.0, 1.0]), DVector::zeros(2))
        .activation(Phi::Tanh)
        .build()
        .unwrap();
    let mut r = rng::seeded(3);
    for _ in 0..50 {
        use rand::Rng as _;
        let x: f64 = r.gen_range(-2.0..2.0);
        let acts = forward(&net, &mat(1, 2, &[x, x]), Mode::Eval, 0).unwrap();
        assert_eq!(acts.output()[(0, 0)], acts.output()[(0, 1)]);
    }
}

#[test]
fn forward_rejects_bad_input_width() {
    let net = Network::builder(&[3])
        .linear_from(Mat::zeros(2, 3), DVector::zeros(2))
        .build()
        .unwrap();
    let err = forward(&net, &mat(1, 2, &[1.0, 2.0]), Mode::Eval, 0).unwrap_err();
    assert!(matches!(err, NetError::InputShape { expected: 3, got: 2 }));
}

#[test]
fn backward_linear_mse_by_hand() {
    // w = 2, x = 1, y = 0, L = (wx - y)^2 -> dL/dw = 2*(2-0)*1 = 4
    let net = Network::builder(&[1])
        .linear_from(mat(1, 1, &[2.0]), DVector::zeros(1))
        .build()
        .unwrap();
    let x = mat(1, 1, &[1.0]);
    let y = mat(1, 1, &[0.0]);
    let mut acts = forward(&net, &x, Mode::Eval, 0).unwrap();
    let lg = Loss::Mse.grad(acts.output(), &y);
    let g = backward(&net, &mut acts, &lg).unwrap();
    assert_eq!(g.to_flat(&net)[0], 4.0);
}

#[test]
fn backward_frozen_relu_gradients_exactly_zero() {
    // Bias -10 on inputs in [0,1]^4 keeps the pre-activation negative, so
    // f'(z) = 0 exactly and every incoming gradient is exactly zero.
    let mut r = rng::seeded(11);
    let net = Network::builder(&[4])
        .linear_from(
            Mat::from_fn(1, 4, |_, _| {
                use rand::Rng as _;
                r.gen_range(-0.5..0.5)
            }),
            DVector::from_element(1, -10.0),
        )
        .activation(Phi::Relu)
        .build()
        .unwrap();
    use rand::Rng as _;
    let x = Mat::from_fn(16, 4, |_, _| r.gen_range(0.0..1.0));
    let y = Mat::from_fn(16, 1, |_, _| r.gen_range(-1.0..1.0));
    let mut acts = forward(&net, &x, Mode::Train, 0).unwrap();
    let lg = Loss::Mse.grad(acts.output(), &y);
    let g = backward(&net, &mut acts, &lg).unwrap();
    for v in g.to_flat(&net) {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn backward_matches_finite_differences_on_mlp() {
    let mut r = rng::seeded(5);
    let net = Network::builder(&[3])
        .linear(5, &mut r)
        .activation(Phi::Tanh)
        .linear(4, &mut r)
        .activation(Phi::Gelu)
        .linear(2, &mut r)
        .build()
        .unwrap();
    use rand::Rng as _;
    let x = Mat::from_fn(4, 3, |_, _| r.gen_range(-1.0..1.0));
    let y = Mat::from_fn(4, 2, |_, _| r.gen_range(-1.0..1.0));
    let mut acts = forward(&net, &x, Mode::Train, 7).unwrap();
    let lg = Loss::Mse.grad(acts.output(), &y);
    let g = backward(&net, &mut acts, &lg).unwrap();
    let fd = finite_diff_gradient(&net, &x, &y, Loss::Mse, Mode::Train, 7, 1e-5).unwrap();
    assert!(max_rel_err(&g.to_flat(&net), &fd) < 1e-6);
}

#[test]
fn finite_diff_quadratic_loss() {
    // out = w * x with x = 1, target 0: L(w) = w^2, dL/dw = 2w = 6 at w = 3.
    let net = Network::builder(&[1])
        .linear_from(mat(1, 1, &[3.0]), DVector::zeros(1))
        .build()
        .unwrap();
    let fd = finite_diff_gradient(
        &net,
        &mat(1, 1, &[1.0]),
        &mat(1, 1, &[0.0]),
        Loss::Mse,
        Mode::Eval,
        0,
        1e-5,
    )
    .unwrap();
    assert!((fd[0] - 6.0).abs() < 1e-8);
}

#[test]
fn finite_diff_zero_input_zero_target_is_zero() {
    let net = Network::builder(&[2])
        .linear_from(mat(2, 2, &[0.3, -0.7, 1.1, 0.2]), DVector::zeros(2))
        .build()
        .unwrap();
    let fd = finite_diff_gradient(
        &net,
        &Mat::zeros(3, 2),
        &Mat::zeros(3, 2),
        Loss::Mse,
        Mode::Eval,
        0,
        1e-5,
    )
    .unwrap();
    for v in fd {
        assert!(v.abs() < 1e-12);
    }
}

#[test]
fn eval_forward_is_bit_deterministic() {
    let case = random_network(42);
    let a = forward(&case.net, &case.x, Mode::Eval, 1).unwrap();
    let b = forward(&case.net, &case.x, Mode::Eval, 2).unwrap();
    for (ma, mb) in a.values.iter().zip(&b.values) {
        assert_eq!(ma.as_slice(), mb.as_slice());
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng::seeded(9);
    let net = Network::builder(&[4])
        .linear(6, &mut r)
        .softmax_output()
        .build()
        .unwrap();
    use rand::Rng as _;
    let x = Mat::from_fn(8, 4, |_, _| r.gen_range(-3.0..3.0));
    let acts = forward(&net, &x, Mode::Eval, 0).unwrap();
    for row in acts.output().row_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dropout_train_scales_and_eval_is_identity() {
    let net = Network::builder(&[10]).dropout(0.5).build().unwrap();
    let x = Mat::from_element(1, 10, 1.0);
    let eval = forward(&net, &x, Mode::Eval, 0).unwrap();
    assert_eq!(eval.output().as_slice(), x.as_slice());
    let train = forward(&net, &x, Mode::Train, 123).unwrap();
    for v in train.output().iter() {
        assert!(*v == 0.0 || *v == 2.0);
    }
    // Same seed, same mask.
    let again = forward(&net, &x, Mode::Train, 123).unwrap();
    assert_eq!(train.output().as_slice(), again.output().as_slice());
}

#[test]
fn batchnorm_running_stats_update_and_eval_path() {
    let mut r = rng::seeded(21);
    let mut net = Network::builder(&[3])
        .linear(4, &mut r)
        .batchnorm()
        .build()
        .unwrap();
    use rand::Rng as _;
    let x = Mat::from_fn(32, 3, |_, _| r.gen_range(-1.0..1.0));
    let acts = forward(&net, &x, Mode::Train, 0).unwrap();
    update_running_stats(&mut net, &acts);
    let ModuleKind::BatchNorm(bn) = &net.modules[1].kind else {
        unreachable!()
    };
    assert!(bn.running_mean.iter().any(|&m| m != 0.0));
    // Eval normalizes with the running stats and is deterministic.
    let e1 = forward(&net, &x, Mode::Eval, 0).unwrap();
    let e2 = forward(&net, &x, Mode::Eval, 99).unwrap();
    assert_eq!(e1.output().as_slice(), e2.output().as_slice());
}

#[test]
fn backward_requires_matching_activations() {
    let mut r = rng::seeded(2);
    let net = Network::builder(&[2]).linear(2, &mut r).build().unwrap();
    let other = Network::builder(&[2])
        .linear(2, &mut r)
        .activation(Phi::Relu)
        .build()
        .unwrap();
    let mut acts = forward(&net, &Mat::zeros(1, 2), Mode::Eval, 0).unwrap();
    let err = backward(&other, &mut acts, &Mat::zeros(1, 2)).unwrap_err();
    assert!(matches!(err, NetError::BackwardBeforeForward));
}

#[test]
fn arch_and_params_round_trip() {
    let case = random_network(7);
    let dir = std::env::temp_dir().join("lop_core_serialize_test");
    std::fs::create_dir_all(&dir).unwrap();
    let arch_path = dir.join("net.json");
    write_arch(&case.net, &arch_path).unwrap();
    let mut restored = read_arch(&arch_path).unwrap();
    let stem = dir.join("params");
    save_params(&case.net, &stem).unwrap();
    load_params(&mut restored, &stem).unwrap();
    assert_eq!(restored.params_flat(), case.net.params_flat());
    let a = forward(&case.net, &case.x, Mode::Eval, 0).unwrap();
    let b = forward(&restored, &case.x, Mode::Eval, 0).unwrap();
    assert_eq!(a.output().as_slice(), b.output().as_slice());
}

#[test]
fn random_cases_pass_gradient_check() {
    // Spot-check a few sampled architectures here; the acceptance suite
    // sweeps twenty.
    for seed in [1, 2, 3] {
        let case = random_network(seed);
        let mut acts = forward(&case.net, &case.x, Mode::Train, seed).unwrap();
        let lg = case.loss.grad(acts.output(), &case.target);
        let g = backward(&case.net, &mut acts, &lg).unwrap();
        let fd = finite_diff_gradient(
            &case.net,
            &case.x,
            &case.target,
            case.loss,
            Mode::Train,
            seed,
            1e-5,
        )
        .unwrap();
        let err = max_rel_err(&g.to_flat(&case.net), &fd);
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
    }
}
