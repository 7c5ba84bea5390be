//! Operating-regime sweeps to CSV.

use crate::config::{parse_phi, ExperimentConfig};
use lop_core::kernel::regime_sweep;
use std::io::Write;
use std::path::Path;

pub fn run_kernel_sweep(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<()> {
    let block = cfg.kernel.as_ref().expect("validated");
    let phi = parse_phi(&block.activation).expect("validated");
    let rows = regime_sweep(
        phi,
        &block.gains,
        &block.biases,
        block.truncation,
        block.quad_order,
        1001,
    );
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(f, "a,b,kappa,alpha,r_star,frozen_proxy,degenerate")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.a, r.b, r.kappa, r.alpha, r.r_star, r.frozen_proxy, r.degenerate
        )?;
    }
    f.flush()?;
    Ok(())
}
