//! Self-check suite behind the `verify` subcommand: gradient engine against
//! the finite-difference oracle, cloning manifold constructions, module
//! certificates, and kernel-vs-Monte-Carlo agreement.

use lop_core::kernel::{kernel_mc_oracle, CorrelationKernel};
use lop_core::manifolds::{
    certify_module, clone_network, equitability_check, network_residual, quotient_network,
    CertifyConfig, Partition,
};
use lop_core::net::{
    backward, finite_diff_gradient, forward, max_rel_err, random_network, Activation, Dropout,
    Mode, ModuleKind, Network, Phi,
};
use lop_core::rng;
use lop_core::Mat;
use rand::Rng as _;
use std::io::Write;

fn check(out: &mut dyn Write, ok: bool, what: &str, detail: String) -> anyhow::Result<bool> {
    writeln!(out, "[{}] {what} ({detail})", if ok { "ok" } else { "FAIL" })?;
    Ok(ok)
}

pub fn run_verify(out: &mut dyn Write) -> anyhow::Result<bool> {
    let mut all = true;

    // Gradient engine vs central differences on sampled architectures.
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let case = random_network(seed);
        let mut acts = forward(&case.net, &case.x, Mode::Train, seed)?;
        let lg = case.loss.grad(acts.output(), &case.target);
        let grads = backward(&case.net, &mut acts, &lg)?;
        let fd = finite_diff_gradient(
            &case.net,
            &case.x,
            &case.target,
            case.loss,
            Mode::Train,
            seed,
            1e-5,
        )?;
        worst = worst.max(max_rel_err(&grads.to_flat(&case.net), &fd));
    }
    all &= check(
        out,
        worst < 1e-6,
        "backward matches finite differences on 20 random architectures",
        format!("max rel err {worst:.2e}"),
    )?;

    // Cloning construction: exact residual, block-equal forward, quotient
    // round trip.
    let mut r = rng::seeded(7);
    let base = Network::mlp(4, &[8, 8, 3], Activation::new(Phi::Tanh), &mut r);
    let n_ifaces = base.num_interfaces();
    let factors: Vec<usize> = (0..n_ifaces)
        .map(|i| if i == 0 || i == n_ifaces - 1 { 1 } else { 2 })
        .collect();
    let (clone, profile) = clone_network(&base, &factors)?;
    let res = network_residual(&clone, &profile);
    all &= check(
        out,
        res.re == 0.0 && res.ce == 0.0 && res.bc == 0.0,
        "clone lies exactly on the block-constant manifold",
        format!("re {:.1e} ce {:.1e} bc {:.1e}", res.re, res.ce, res.bc),
    )?;
    let mut dev = 0.0f64;
    for _ in 0..16 {
        let x = Mat::from_fn(4, 4, |_, _| r.gen_range(-1.0..1.0));
        let ab = forward(&base, &x, Mode::Eval, 0)?;
        let ac = forward(&clone, &profile.lift_input(&x), Mode::Eval, 0)?;
        for iface in 1..clone.num_interfaces() {
            let part = profile.unit_partition(&clone, iface);
            for (bi, block) in part.blocks().iter().enumerate() {
                for s in 0..4 {
                    for &u in block {
                        dev = dev.max((ac.values[iface][(s, u)] - ab.values[iface][(s, bi)]).abs());
                    }
                }
            }
        }
    }
    all &= check(
        out,
        dev < 1e-12,
        "cloned blocks reproduce base activations",
        format!("max deviation {dev:.2e}"),
    )?;
    let round = quotient_network(&clone, &profile, None)?;
    all &= check(
        out,
        round.params_flat() == base.params_flat(),
        "quotient of the clone restores the base parameters exactly",
        "bitwise".into(),
    )?;

    // Equitability on the canonical example.
    let w = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    let one = Partition::uniform(1, 2);
    let rep = equitability_check(&w, &one, &one, 1e-9)?;
    all &= check(
        out,
        rep.re.pass && rep.ce.pass && !rep.bc.pass,
        "equitability separates RE∩CE from BC",
        format!("re {} ce {} bc {}", rep.re.pass, rep.ce.pass, rep.bc.pass),
    )?;

    // Module certificates: every supported kind passes; dropout must fail
    // forward preservation.
    let cert_cfg = CertifyConfig::default();
    let base_small = Network::mlp(3, &[4, 2], Activation::new(Phi::Gelu), &mut r);
    let (clone_small, prof_small) = clone_network(&base_small, &[1, 2, 2, 1])?;
    let lin = &clone_small.modules[0];
    let rep = certify_module(
        &lin.kind,
        &[&prof_small.unit_partition(&clone_small, 0)],
        &prof_small.unit_partition(&clone_small, 1),
        &cert_cfg,
    )?;
    all &= check(
        out,
        rep.mc1.pass && rep.mc2.pass && rep.mc3.pass,
        "linear module certificate",
        format!("dev {:.1e}/{:.1e}/{:.1e}", rep.mc1.max_dev, rep.mc2.max_dev, rep.mc3.max_dev),
    )?;
    let part = Partition::uniform(4, 2);
    let dropout = ModuleKind::Dropout(Dropout { p: 0.5 });
    let rep = certify_module(&dropout, &[&part], &part, &cert_cfg)?;
    all &= check(
        out,
        !rep.mc1.pass,
        "dropout breaks forward interface preservation",
        format!("mc1 dev {:.2e}", rep.mc1.max_dev),
    )?;

    // Kernel vs Monte-Carlo oracle.
    let mut worst_sigma = 0.0f64;
    for phi in [Phi::Relu, Phi::Tanh, Phi::Gelu] {
        let activation = Activation::new(phi);
        let kernel = CorrelationKernel::fit(activation).unwrap();
        for (i, r_val) in [-0.8, -0.4, 0.2, 0.6, 0.9].iter().enumerate() {
            let est = kernel_mc_oracle(&activation, *r_val, 1_000_000, 1000 + i as u64)?;
            let kv = kernel.eval(*r_val).unwrap();
            worst_sigma = worst_sigma.max((kv - est.corr).abs() / est.stderr);
        }
    }
    all &= check(
        out,
        worst_sigma < 3.0,
        "correlation kernels match the bivariate Monte-Carlo oracle",
        format!("worst deviation {worst_sigma:.2} standard errors"),
    )?;

    writeln!(out, "{}", if all { "verify: all checks passed" } else { "verify: FAILURES above" })?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_passes_and_prints_lines() {
        let mut buf = Vec::new();
        let ok = run_verify(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(ok, "{text}");
        assert!(text.lines().filter(|l| l.starts_with("[ok]")).count() >= 7, "{text}");
    }
}
