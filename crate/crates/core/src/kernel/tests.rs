use super::*;
use crate::net::{Activation, Phi};
use crate::rng;
use crate::Mat;
use rand::Rng as _;
use rand_distr::StandardNormal;

fn act(phi: Phi) -> Activation {
    Activation::new(phi)
}

#[test]
fn identity_has_only_first_coefficient() {
    let (coeffs, sigma2) = hermite_coeffs(&act(Phi::Identity), 10, 64).unwrap();
    assert!((coeffs[1] - 1.0).abs() < 1e-12);
    for (k, c) in coeffs.iter().enumerate() {
        if k != 1 {
            assert!(c.abs() < 1e-12, "a_{k} = {c}");
        }
    }
    assert!((sigma2 - 1.0).abs() < 1e-12);
}

#[test]
fn constant_activation_is_degenerate() {
    // gain 0 makes the activation constant: a_0 = c, sigma² = 0.
    let constant = Activation::with_regime(Phi::Identity, 0.0, 2.5);
    let (coeffs, sigma2) = hermite_coeffs(&constant, 10, 64).unwrap();
    assert!((coeffs[0] - 2.5).abs() < 1e-12);
    assert!(sigma2 < 1e-20);
    assert!(matches!(
        CorrelationKernel::fit(constant),
        Err(KernelError::Degenerate { .. })
    ));
}

#[test]
fn relu_coefficients_match_monte_carlo() {
    // Oracle: sample E[phi(Z) h_k(Z)] directly and compare within 3 SE.
    let (coeffs, _) = hermite_coeffs(&act(Phi::Relu), 6, 64).unwrap();
    let n = 1_000_000usize;
    let mut r = rng::seeded(99);
    let mut sums = vec![0.0; 7];
    let mut sumsq = vec![0.0; 7];
    for _ in 0..n {
        let z: f64 = r.sample(StandardNormal);
        let f = z.max(0.0);
        let h = hermite_basis(z, 6);
        for k in 0..=6 {
            let v = f * h[k];
            sums[k] += v;
            sumsq[k] += v * v;
        }
    }
    for k in 0..=6 {
        let mean = sums[k] / n as f64;
        let var = sumsq[k] / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(
            (coeffs[k] - mean).abs() < 3.0 * se + 1e-12,
            "a_{k}: quad {} vs mc {} (se {se})",
            coeffs[k],
            mean
        );
    }
}

#[test]
fn kernel_fixed_points_and_weights() {
    for phi in [Phi::Relu, Phi::Tanh, Phi::Gelu] {
        let k = CorrelationKernel::fit(act(phi)).unwrap();
        assert_eq!(k.eval(0.0).unwrap(), 0.0);
        assert_eq!(k.eval(1.0).unwrap(), 1.0);
        assert!(k.weights.iter().all(|&w| w >= 0.0));
        let total: f64 = k.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-10, "{phi:?}: {total}");
    }
}

#[test]
fn linear_kernel_is_identity_map() {
    let k = CorrelationKernel::fit(act(Phi::Identity)).unwrap();
    for i in 0..21 {
        let r = -1.0 + i as f64 * 0.1;
        assert!((k.eval(r).unwrap() - r).abs() < 1e-10, "r = {r}");
    }
}

#[test]
fn strict_contraction_for_nonlinear_kernels() {
    for phi in [Phi::Relu, Phi::Tanh, Phi::Gelu] {
        let k = CorrelationKernel::fit(act(phi)).unwrap();
        for i in 1..20 {
            let r = -0.95 + i as f64 * 0.1;
            if r.abs() < 1e-9 {
                continue;
            }
            let kr = k.eval(r).unwrap();
            assert!(kr.abs() < r.abs(), "{phi:?} at {r}: {kr}");
        }
    }
}

#[test]
fn kernel_eval_rejects_out_of_range() {
    let k = CorrelationKernel::fit(act(Phi::Tanh)).unwrap();
    assert!(k.eval(1.5).is_err());
}

#[test]
fn mc_oracle_exact_at_unit_correlation() {
    let est = kernel_mc_oracle(&act(Phi::Relu), 1.0, 20_000, 3).unwrap();
    assert!((est.corr - 1.0).abs() < 1e-12);
}

#[test]
fn mc_oracle_zero_at_zero_correlation() {
    let est = kernel_mc_oracle(&act(Phi::Tanh), 0.0, 100_000, 4).unwrap();
    assert!(est.corr.abs() < 3.0 * est.stderr, "{} vs {}", est.corr, est.stderr);
}

#[test]
fn mc_oracle_zero_variance_is_error() {
    let constant = Activation::with_regime(Phi::Identity, 0.0, 1.0);
    assert!(matches!(
        kernel_mc_oracle(&constant, 0.3, 10_000, 5),
        Err(KernelError::ZeroVariance)
    ));
}

#[test]
fn quadrature_kernel_matches_mc_on_grid() {
    // Spot grid here; the acceptance suite runs the full 21-point grid for
    // three activations and three regimes.
    let tanh2 = Activation::with_regime(Phi::Tanh, 2.0, 0.0);
    let k = CorrelationKernel::fit(tanh2).unwrap();
    for (i, r) in [-0.9, -0.5, 0.25, 0.5, 0.8].iter().enumerate() {
        let est = kernel_mc_oracle(&tanh2, *r, 1_000_000, 10 + i as u64).unwrap();
        let kv = k.eval(*r).unwrap();
        assert!(
            (kv - est.corr).abs() < 3.0 * est.stderr,
            "r = {r}: kernel {kv} vs mc {} (se {})",
            est.corr,
            est.stderr
        );
    }
}

#[test]
fn apply_kernel_identity_and_ones_fixed_points() {
    let k = CorrelationKernel::fit(act(Phi::Relu)).unwrap();
    let eye = Mat::identity(4, 4);
    assert_eq!(apply_kernel(&eye, &k).unwrap(), eye);
    let ones = Mat::from_element(4, 4, 1.0);
    assert_eq!(apply_kernel(&ones, &k).unwrap(), ones);
}

#[test]
fn apply_kernel_requires_unit_diagonal() {
    let k = CorrelationKernel::fit(act(Phi::Relu)).unwrap();
    let mut c = Mat::identity(3, 3);
    c[(1, 1)] = 0.9;
    assert!(matches!(
        apply_kernel(&c, &k),
        Err(KernelError::NotUnitDiagonal { index: 1, .. })
    ));
}

#[test]
fn apply_kernel_preserves_psd() {
    let k = CorrelationKernel::fit(act(Phi::Relu)).unwrap();
    for seed in 0..20 {
        let c = random_correlation(8, seed);
        let mapped = apply_kernel(&c, &k).unwrap();
        let min_eig = mapped
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig >= -1e-8, "seed {seed}: min eig {min_eig}");
    }
}

#[test]
fn effective_ranks_known_values() {
    let eye = Mat::identity(5, 5);
    let r = effective_ranks(&eye).unwrap();
    assert!((r.renyi2 - 5.0).abs() < 1e-12);
    assert!((r.shannon - 5.0).abs() < 1e-12);

    let ones = Mat::from_element(4, 4, 1.0);
    let r = effective_ranks(&ones).unwrap();
    assert!((r.renyi2 - 1.0).abs() < 1e-12);
    assert!((r.shannon - 1.0).abs() < 1e-9);

    // diag(2, 1, 1): renyi2 = 16/6.
    let d = Mat::from_diagonal(&crate::DVector::from_vec(vec![2.0, 1.0, 1.0]));
    let r = effective_ranks(&d).unwrap();
    assert!((r.renyi2 - 16.0 / 6.0).abs() < 1e-12);
}

#[test]
fn rank_gain_linear_kernel_is_one() {
    let k = CorrelationKernel::fit(act(Phi::Identity)).unwrap();
    for seed in 0..5 {
        let c = random_correlation(6, seed);
        let g = rank_gain_ratio(&c, &k).unwrap();
        assert!((g.ratio - 1.0).abs() < 1e-9, "{}", g.ratio);
    }
}

#[test]
fn rank_gain_exceeds_one_for_intermediate_correlations() {
    let k = CorrelationKernel::fit(act(Phi::Relu)).unwrap();
    for seed in 0..20 {
        let c = random_correlation(6, 100 + seed);
        let has_intermediate = (0..6).any(|i| {
            (0..6).any(|j| i != j && c[(i, j)].abs() > 0.05 && c[(i, j)].abs() < 0.95)
        });
        let g = rank_gain_ratio(&c, &k).unwrap();
        assert!((g.ratio - g.ratio_recomputed).abs() < 1e-10);
        if has_intermediate {
            assert!(g.ratio > 1.0 + 1e-6, "seed {seed}: {}", g.ratio);
        }
    }
}

#[test]
fn rank_gain_two_by_two_composes_verified_pieces() {
    let k = CorrelationKernel::fit(act(Phi::Relu)).unwrap();
    let mut c = Mat::identity(2, 2);
    c[(0, 1)] = 0.5;
    c[(1, 0)] = 0.5;
    let kv = k.eval(0.5).unwrap();
    let expected = 2.5 / (2.0 + 2.0 * kv * kv);
    let g = rank_gain_ratio(&c, &k).unwrap();
    assert!((g.ratio - expected).abs() < 1e-12);
}

#[test]
fn frobenius_contraction_on_random_matrices() {
    let k = CorrelationKernel::fit(act(Phi::Tanh)).unwrap();
    for seed in 0..10 {
        let c = random_correlation(8, 200 + seed);
        let mapped = apply_kernel(&c, &k).unwrap();
        let off = |m: &Mat| -> f64 {
            let mut s = 0.0;
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if i != j {
                        s += m[(i, j)] * m[(i, j)];
                    }
                }
            }
            s
        };
        assert!(off(&mapped) <= off(&c) + 1e-12);
    }
}

#[test]
fn decorrelation_strength_zero_iff_linear() {
    let linear = CorrelationKernel::fit(act(Phi::Identity)).unwrap();
    let kappa = decorrelation_strength(&linear, 1001).unwrap();
    assert!(kappa.kappa < 1e-12);

    let relu = CorrelationKernel::fit(act(Phi::Relu)).unwrap();
    assert!(decorrelation_strength(&relu, 1001).unwrap().kappa > 1e-3);
}

#[test]
fn relu_bias_grid_increases_kappa() {
    // More negative effective bias = stronger decorrelation.
    let mut last = -1.0;
    for b in [0.0, -0.5, -1.0, -1.5] {
        let k = CorrelationKernel::fit(Activation::with_regime(Phi::Relu, 1.0, b)).unwrap();
        let kappa = decorrelation_strength(&k, 1001).unwrap().kappa;
        assert!(kappa > last, "b = {b}: {kappa} <= {last}");
        last = kappa;
    }
}

#[test]
fn tanh_gain_grid_increases_kappa() {
    let mut last = -1.0;
    for a in [0.5, 1.0, 2.0, 4.0] {
        let k = CorrelationKernel::fit(Activation::with_regime(Phi::Tanh, a, 0.0)).unwrap();
        let kappa = decorrelation_strength(&k, 1001).unwrap().kappa;
        assert!(kappa > last, "a = {a}: {kappa} <= {last}");
        last = kappa;
    }
}

#[test]
fn regime_sweep_links_saturation_and_decorrelation() {
    // ReLU with very negative bias: dead probability approaches 1 and the
    // regime degenerates.
    let rows = regime_sweep(Phi::Relu, &[1.0], &[0.0, -2.0, -8.0], 30, 128, 501);
    assert!(rows[2].frozen_proxy > 1.0 - 1e-10);
    assert!(rows[2].degenerate);
    assert!(rows[1].frozen_proxy > rows[0].frozen_proxy);

    // Identity: alpha = 1/1 - 1 = 0.
    let rows = regime_sweep(Phi::Identity, &[1.0], &[0.0], 30, 128, 501);
    assert!(rows[0].alpha.abs() < 1e-10);

    // tanh gain 4: smaller typical derivatives, larger kappa.
    let rows = regime_sweep(Phi::Tanh, &[1.0, 4.0], &[0.0], 30, 128, 501);
    assert!(rows[1].frozen_proxy < rows[0].frozen_proxy);
    assert!(rows[1].kappa > rows[0].kappa);
}

#[test]
fn alpha_matches_kernel_slope() {
    // E[f'²]/Var(f) - 1 computed by quadrature equals K'(1) - 1 from the
    // fitted weights (Hermite identity), up to truncation error.
    for (phi, a, b) in [
        (Phi::Tanh, 1.0, 0.0),
        (Phi::Tanh, 2.0, 0.3),
        (Phi::Gelu, 1.0, -0.2),
    ] {
        let activation = Activation::with_regime(phi, a, b);
        let alpha = sweep::local_decorrelation_rate(&activation, 128);
        let k = CorrelationKernel::fit_with(activation, 40, 128).unwrap();
        let slope_alpha = k.slope_at_one() - 1.0;
        // Agreement is truncation-limited; sharper regimes carry more
        // weight beyond k = 40.
        let tol = (0.01 * alpha).max(1e-5);
        assert!(
            (alpha - slope_alpha).abs() < tol,
            "{phi:?} ({a}, {b}): {alpha} vs {slope_alpha}"
        );
    }
}

#[test]
fn truncation_is_converged() {
    // Measured truncation control: K = 20 -> 40 moves gelu by < 1e-6 and
    // tanh by < 1e-5 on [-0.99, 0.99] (tanh's k=21 weight is ~4e-6); the
    // ReLU series converges only algebraically near |r| = 1 (~1e-3, checked
    // against the closed-form arccosine kernel).
    for (phi, tol) in [(Phi::Tanh, 1e-5), (Phi::Gelu, 1e-6), (Phi::Relu, 2e-3)] {
        let k20 = CorrelationKernel::fit_with(act(phi), 20, 128).unwrap();
        let k40 = CorrelationKernel::fit_with(act(phi), 40, 128).unwrap();
        let mut sup = 0.0f64;
        for i in 0..199 {
            let r = -0.99 + i as f64 * 0.01;
            sup = sup.max((k20.eval(r).unwrap() - k40.eval(r).unwrap()).abs());
        }
        assert!(sup < tol, "{phi:?}: sup diff {sup}");
    }
}

proptest::proptest! {
    // Rank gain >= 1 for arbitrary random unit-diagonal PSD inputs.
    #[test]
    fn rank_gain_never_below_one(seed in 0u64..500, d in 2usize..10) {
        let k = CorrelationKernel::fit(act(Phi::Gelu)).unwrap();
        let c = random_correlation(d, seed);
        let g = rank_gain_ratio(&c, &k).unwrap();
        proptest::prop_assert!(g.ratio >= 1.0 - 1e-10);
    }
}

#[test]
fn mc_oracle_parallel_and_sequential_agree_bitwise() {
    let a = Activation::new(Phi::Gelu);
    let par = kernel_mc_oracle(&a, 0.4, 123_456, 9).unwrap();
    let seq = super::mc::kernel_mc_oracle_seq(&a, 0.4, 123_456, 9).unwrap();
    assert_eq!(par.corr.to_bits(), seq.corr.to_bits());
    assert_eq!(par.stderr.to_bits(), seq.stderr.to_bits());
}

#[test]
fn kernel_serializes_as_structured_text() {
    let k = CorrelationKernel::fit(Activation::with_regime(Phi::Relu, 1.2, -0.4)).unwrap();
    let text = serde_json::to_string(&k).unwrap();
    let back: CorrelationKernel = serde_json::from_str(&text).unwrap();
    assert_eq!(back.weights, k.weights);
    assert_eq!(back.source, k.source);
    assert_eq!(back.eval(0.37).unwrap(), k.eval(0.37).unwrap());
}
