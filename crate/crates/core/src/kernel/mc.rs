//! Bivariate-Gaussian Monte-Carlo oracle for the correlation kernel.
//!
//! Samples are drawn in fixed-size chunks, each from a seed derived from
//! `(seed, chunk index)`, and chunk statistics are combined in index order
//! — so the estimate is bit-identical whether the chunks run sequentially
//! or in parallel, and the standard error comes assumption-free from the
//! spread of per-chunk correlations.

use super::KernelError;
use crate::net::Activation;
use crate::rng;
use rand::Rng as _;
use rand_distr::StandardNormal;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const CHUNK: usize = 10_000;

#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    /// Pooled Pearson correlation of `(phi(X), phi(Y))`.
    pub corr: f64,
    /// Std of per-chunk correlations over sqrt(#chunks).
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct ChunkStats {
    n: f64,
    su: f64,
    sv: f64,
    suu: f64,
    svv: f64,
    suv: f64,
    corr: f64,
}

fn pearson(n: f64, su: f64, sv: f64, suu: f64, svv: f64, suv: f64) -> Option<f64> {
    let cov = suv - su * sv / n;
    let vu = suu - su * su / n;
    let vv = svv - sv * sv / n;
    if vu <= 0.0 || vv <= 0.0 {
        return None;
    }
    Some(cov / (vu * vv).sqrt())
}

fn run_chunk(act: &Activation, r: f64, n: usize, seed: u64) -> ChunkStats {
    let mut rng = rng::seeded(seed);
    let tail = (1.0 - r * r).max(0.0).sqrt();
    let mut s = ChunkStats {
        n: n as f64,
        ..Default::default()
    };
    for _ in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let x = z1;
        let y = r * z1 + tail * z2;
        let u = act.eval(x);
        let v = act.eval(y);
        s.su += u;
        s.sv += v;
        s.suu += u * u;
        s.svv += v * v;
        s.suv += u * v;
    }
    s.corr = pearson(s.n, s.su, s.sv, s.suu, s.svv, s.suv).unwrap_or(f64::NAN);
    s
}

fn chunk_layout(n: usize) -> Vec<(usize, usize)> {
    let full = n / CHUNK;
    let rem = n % CHUNK;
    let mut c: Vec<(usize, usize)> = (0..full).map(|i| (i, CHUNK)).collect();
    if rem > 0 {
        c.push((full, rem));
    }
    c
}

/// Estimate `Corr(phi(X), phi(Y))` for `(X, Y)` standard bivariate Gaussian
/// with correlation `r`, from `n` sample pairs. Chunks run on the rayon
/// pool when the `parallel` feature is enabled; results are bit-identical
/// to [`kernel_mc_oracle_seq`] either way.
pub fn kernel_mc_oracle(
    act: &Activation,
    r: f64,
    n: usize,
    seed: u64,
) -> Result<McEstimate, KernelError> {
    if !(-1.0..=1.0).contains(&r) {
        return Err(KernelError::BadCorrelation { r });
    }
    let chunks = chunk_layout(n);
    #[cfg(feature = "parallel")]
    let stats: Vec<ChunkStats> = chunks
        .par_iter()
        .map(|&(i, len)| run_chunk(act, r, len, rng::derive(seed, i as u64)))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let stats: Vec<ChunkStats> = chunks
        .iter()
        .map(|&(i, len)| run_chunk(act, r, len, rng::derive(seed, i as u64)))
        .collect();
    combine(&stats)
}

/// Single-threaded reference path; same chunking, same seeds, same result.
pub fn kernel_mc_oracle_seq(
    act: &Activation,
    r: f64,
    n: usize,
    seed: u64,
) -> Result<McEstimate, KernelError> {
    if !(-1.0..=1.0).contains(&r) {
        return Err(KernelError::BadCorrelation { r });
    }
    let stats: Vec<ChunkStats> = chunk_layout(n)
        .iter()
        .map(|&(i, len)| run_chunk(act, r, len, rng::derive(seed, i as u64)))
        .collect();
    combine(&stats)
}

fn combine(stats: &[ChunkStats]) -> Result<McEstimate, KernelError> {
    let mut total = ChunkStats::default();
    for s in stats {
        total.n += s.n;
        total.su += s.su;
        total.sv += s.sv;
        total.suu += s.suu;
        total.svv += s.svv;
        total.suv += s.suv;
    }
    let corr = pearson(total.n, total.su, total.sv, total.suu, total.svv, total.suv)
        .ok_or(KernelError::ZeroVariance)?;
    let chunk_corrs: Vec<f64> = stats.iter().map(|s| s.corr).filter(|c| c.is_finite()).collect();
    let stderr = if chunk_corrs.len() >= 2 {
        let m = chunk_corrs.iter().sum::<f64>() / chunk_corrs.len() as f64;
        let var = chunk_corrs.iter().map(|c| (c - m) * (c - m)).sum::<f64>()
            / (chunk_corrs.len() - 1) as f64;
        (var / chunk_corrs.len() as f64).sqrt()
    } else {
        // Single chunk: fall back to the asymptotic Pearson rate.
        (1.0 - corr * corr) / total.n.sqrt()
    };
    Ok(McEstimate {
        corr,
        stderr,
        n: total.n as usize,
    })
}
