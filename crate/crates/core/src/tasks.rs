//! Non-stationary task generators: the bit-flipping LTU regression stream
//! and a synthetic continual classification sequence, plus an IDX-format
//! reader for externally supplied small image data.

use crate::rng;
use crate::Mat;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("beta must lie in (0, 1), got {0}")]
    BadBeta(f64),
    #[error("flipping bits {f} exceed input bits {m}")]
    TooManyFlipping { m: usize, f: usize },
    #[error("idx: {0}")]
    Idx(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Bit-flipping LTU regression
// ---------------------------------------------------------------------------

/// Fixed target network of linear threshold units: `h_i = LTU(w_i·x - θ_i)`
/// with `w_i ∈ {-1, +1}^{m+1}` (bias bit included) and
/// `θ_i = m·β - S_i`, `S_i = #{j : w_ij < 0} - 0.5·w_{i,m+1}`;
/// `y = w_out·h + b_out`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LtuTarget {
    pub m: usize,
    pub f: usize,
    pub beta: f64,
    /// width x (m + 1) sign matrix.
    pub weights: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

/// `LTU(z) = 1 if z >= 0 else 0`.
pub fn ltu(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn build_ltu_target(
    m: usize,
    f: usize,
    beta: f64,
    width: usize,
    seed: u64,
) -> Result<LtuTarget, TaskError> {
    if !(0.0..1.0).contains(&beta) || beta == 0.0 {
        return Err(TaskError::BadBeta(beta));
    }
    if f > m {
        return Err(TaskError::TooManyFlipping { m, f });
    }
    let mut r = rng::seeded(seed);
    let mut weights = Vec::with_capacity(width);
    let mut thresholds = Vec::with_capacity(width);
    for _ in 0..width {
        let w: Vec<f64> = (0..=m).map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let negatives = w.iter().filter(|&&v| v < 0.0).count() as f64;
        let s = negatives - 0.5 * w[m];
        thresholds.push(m as f64 * beta - s);
        weights.push(w);
    }
    let w_out: Vec<f64> = (0..width).map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Ok(LtuTarget {
        m,
        f,
        beta,
        weights,
        thresholds,
        w_out,
        b_out: 0.0,
    })
}

impl LtuTarget {
    pub fn width(&self) -> usize {
        self.weights.len()
    }

    /// Evaluate the target on an `m + 1` bit vector (bias bit last).
    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.m + 1);
        let mut y = self.b_out;
        for (i, w) in self.weights.iter().enumerate() {
            let z: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum();
            y += self.w_out[i] * ltu(z - self.thresholds[i]);
        }
        y
    }
}

/// Online input stream: `f` flipping bits hold their values within each
/// `flip_period`-step window and exactly one inverts at every positive
/// multiple of the period; the remaining `m - f` bits resample uniformly
/// every step; the bias bit is fixed at 1.
#[derive(Debug, Clone)]
pub struct BitflipStream {
    pub flip_period: u64,
    flipping: Vec<f64>,
    step: u64,
    rng: rng::Rng,
}

impl BitflipStream {
    pub fn new(target: &LtuTarget, flip_period: u64, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let flipping = (0..target.f)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        BitflipStream {
            flip_period,
            flipping,
            step: 0,
            rng,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Next `(x, y)` pair; `x` has `m + 1` entries including the bias bit.
    pub fn next_sample(&mut self, target: &LtuTarget) -> (Vec<f64>, f64) {
        if self.step > 0 && self.step.is_multiple_of(self.flip_period) && !self.flipping.is_empty() {
            let idx = self.rng.gen_range(0..self.flipping.len());
            self.flipping[idx] = 1.0 - self.flipping[idx];
        }
        self.step += 1;
        let mut x = Vec::with_capacity(target.m + 1);
        x.extend_from_slice(&self.flipping);
        for _ in target.f..target.m {
            x.push(if self.rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        }
        x.push(1.0);
        let y = target.eval(&x);
        (x, y)
    }

    pub fn flipping_bits(&self) -> &[f64] {
        &self.flipping
    }
}

// ---------------------------------------------------------------------------
// Synthetic continual classification
// ---------------------------------------------------------------------------

/// Gaussian-cluster classification split into tasks with disjoint class
/// subsets. Class means sit on a sphere of radius `separation`; clusters
/// have unit variance.
#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub separation: f64,
    seed: u64,
    /// Global class id -> mean vector.
    means: Vec<Vec<f64>>,
}

pub fn make_task_sequence(
    n_tasks: usize,
    classes_per_task: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> TaskSequence {
    let mut r = rng::seeded(rng::derive(seed, 0x6d65616e));
    let total = n_tasks * classes_per_task;
    let means = (0..total)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / norm * separation).collect()
        })
        .collect();
    TaskSequence {
        n_tasks,
        classes_per_task,
        dim,
        separation,
        seed,
        means,
    }
}

impl TaskSequence {
    /// Global class ids assigned to task `t` (disjoint across tasks).
    pub fn classes_of(&self, task: usize) -> std::ops::Range<usize> {
        task * self.classes_per_task..(task + 1) * self.classes_per_task
    }

    /// A batch for task `t`: inputs plus one-hot labels over the task's
    /// local classes. Reproducible in `(seed, task, step)`.
    pub fn sample_batch(&self, task: usize, batch: usize, step: u64) -> (Mat, Mat) {
        let label = rng::derive(self.seed, (task as u64) << 32 | step);
        let mut r = rng::seeded(label);
        let mut x = Mat::zeros(batch, self.dim);
        let mut y = Mat::zeros(batch, self.classes_per_task);
        for s in 0..batch {
            let local = r.gen_range(0..self.classes_per_task);
            let class = self.classes_of(task).start + local;
            for j in 0..self.dim {
                x[(s, j)] = self.means[class][j] + r.sample::<f64, _>(StandardNormal);
            }
            y[(s, local)] = 1.0;
        }
        (x, y)
    }
}

// ---------------------------------------------------------------------------
// IDX image/label files
// ---------------------------------------------------------------------------

/// Parsed IDX payload: unsigned bytes plus dimensions.
#[derive(Debug, Clone)]
pub struct IdxData {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Read the de-facto IDX layout: big-endian magic `0x00 0x00 0x08 <ndims>`,
/// then `ndims` big-endian u32 sizes, then the raw u8 payload.
pub fn read_idx(path: &std::path::Path) -> Result<IdxData, TaskError> {
    let raw = std::fs::read(path)?;
    if raw.len() < 4 || raw[0] != 0 || raw[1] != 0 {
        return Err(TaskError::Idx("bad magic".into()));
    }
    if raw[2] != 0x08 {
        return Err(TaskError::Idx(format!(
            "unsupported dtype 0x{:02x} (only u8)",
            raw[2]
        )));
    }
    let ndims = raw[3] as usize;
    let header = 4 + 4 * ndims;
    if raw.len() < header {
        return Err(TaskError::Idx("truncated header".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([raw[o], raw[o + 1], raw[o + 2], raw[o + 3]]) as usize
        })
        .collect();
    let expected: usize = dims.iter().product();
    if raw.len() != header + expected {
        return Err(TaskError::Idx(format!(
            "payload is {} bytes, dims {:?} require {expected}",
            raw.len() - header,
            dims
        )));
    }
    Ok(IdxData {
        dims,
        data: raw[header..].to_vec(),
    })
}

/// Uniformly shuffled index order for subsampling, seeded.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ltu_fires_at_zero() {
        assert_eq!(ltu(0.0), 1.0);
        assert_eq!(ltu(-1e-300), 0.0);
    }

    #[test]
    fn threshold_formula_by_hand() {
        // m = 4, beta = 0.7, w = (+1, -1, +1, -1) with bias weight +1:
        // S = 2 - 0.5 = 1.5, theta = 2.8 - 1.5 = 1.3.
        let mut t = build_ltu_target(4, 2, 0.7, 1, 0).unwrap();
        t.weights[0] = vec![1.0, -1.0, 1.0, -1.0, 1.0];
        let negatives = t.weights[0].iter().filter(|&&v| v < 0.0).count() as f64;
        let s = negatives - 0.5 * t.weights[0][4];
        let theta = 4.0 * 0.7 - s;
        assert_eq!(s, 1.5);
        assert!((theta - 1.3).abs() < 1e-12);
    }

    #[test]
    fn construction_uses_the_formula() {
        let t = build_ltu_target(12, 6, 0.55, 32, 9).unwrap();
        for (w, &theta) in t.weights.iter().zip(&t.thresholds) {
            let negatives = w.iter().filter(|&&v| v < 0.0).count() as f64;
            let s = negatives - 0.5 * w[12];
            assert!((theta - (12.0 * 0.55 - s)).abs() < 1e-12);
        }
        assert!(build_ltu_target(4, 5, 0.7, 1, 0).is_err());
        assert!(build_ltu_target(4, 2, 0.0, 1, 0).is_err());
    }

    #[test]
    fn same_seed_same_target_and_stream() {
        let a = build_ltu_target(8, 4, 0.7, 16, 3).unwrap();
        let b = build_ltu_target(8, 4, 0.7, 16, 3).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.thresholds, b.thresholds);
        let mut sa = BitflipStream::new(&a, 100, 5);
        let mut sb = BitflipStream::new(&b, 100, 5);
        for _ in 0..500 {
            assert_eq!(sa.next_sample(&a), sb.next_sample(&b));
        }
    }

    #[test]
    fn flipping_bits_hold_within_window() {
        let t = build_ltu_target(8, 4, 0.7, 16, 3).unwrap();
        let mut s = BitflipStream::new(&t, 1_000_000, 1);
        let initial = s.flipping_bits().to_vec();
        for _ in 0..10 {
            let (x, _) = s.next_sample(&t);
            assert_eq!(&x[..4], initial.as_slice());
            assert_eq!(x[8], 1.0, "bias bit");
        }
    }

    #[test]
    fn exactly_one_bit_flips_at_the_boundary() {
        let t = build_ltu_target(8, 4, 0.7, 16, 3).unwrap();
        let mut s = BitflipStream::new(&t, 10, 2);
        let mut before = s.flipping_bits().to_vec();
        for _ in 0..10 {
            s.next_sample(&t);
        }
        // Step counter is now 10; the next sample crosses the boundary.
        s.next_sample(&t);
        let after = s.flipping_bits().to_vec();
        let hamming: usize = before
            .iter()
            .zip(&after)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(hamming, 1);
        before = after;
        for _ in 0..9 {
            s.next_sample(&t);
            assert_eq!(s.flipping_bits(), before.as_slice());
        }
    }

    #[test]
    fn target_is_piecewise_constant_in_time() {
        // Identical x within one window yields identical y (the target is
        // fixed; only the input distribution drifts).
        let t = build_ltu_target(6, 2, 0.6, 8, 7).unwrap();
        let x = vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let y1 = t.eval(&x);
        let y2 = t.eval(&x);
        assert_eq!(y1, y2);
    }

    #[test]
    fn task_classes_are_disjoint_and_cover() {
        let seq = make_task_sequence(5, 3, 8, 4.0, 11);
        let mut seen = vec![false; 15];
        for t in 0..5 {
            for c in seq.classes_of(t) {
                assert!(!seen[c]);
                seen[c] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn task_batches_are_reproducible() {
        let seq = make_task_sequence(2, 2, 4, 6.0, 3);
        let (xa, ya) = seq.sample_batch(1, 16, 42);
        let (xb, yb) = seq.sample_batch(1, 16, 42);
        assert_eq!(xa.as_slice(), xb.as_slice());
        assert_eq!(ya.as_slice(), yb.as_slice());
        let (xc, _) = seq.sample_batch(1, 16, 43);
        assert_ne!(xa.as_slice(), xc.as_slice());
    }

    #[test]
    fn zero_separation_means_chance_level() {
        // With coincident class means the optimal accuracy is 1 / classes:
        // inputs carry no label information by construction.
        let seq = make_task_sequence(1, 4, 6, 0.0, 5);
        let (x, _) = seq.sample_batch(0, 64, 0);
        // All class means are the zero vector, so inputs are pure noise.
        let mean = x.sum() / (64.0 * 6.0);
        assert!(mean.abs() < 0.2);
        for c in 0..4 {
            let m = &seq.means[c];
            assert!(m.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn separated_tasks_are_linearly_solvable() {
        // separation 10 in dim 8: a least-squares linear probe reaches
        // > 99% within-task accuracy.
        let seq = make_task_sequence(2, 2, 8, 10.0, 1);
        let (x, y) = seq.sample_batch(0, 400, 0);
        // One-hot least squares: W = (XtX)^-1 Xt Y.
        let xtx = x.transpose() * &x + Mat::identity(8, 8) * 1e-6;
        let w = xtx.lu().solve(&(x.transpose() * &y)).unwrap();
        let (xt, yt) = seq.sample_batch(0, 400, 1);
        let pred = xt * w;
        let mut correct = 0;
        for s in 0..400 {
            let argmax = |m: &Mat, s: usize| -> usize {
                (0..m.ncols()).max_by(|&a, &b| m[(s, a)].partial_cmp(&m[(s, b)]).unwrap()).unwrap()
            };
            if argmax(&pred, s) == argmax(&yt, s) {
                correct += 1;
            }
        }
        assert!(correct as f64 / 400.0 > 0.99, "{correct}/400");
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = std::env::temp_dir().join("lop_idx_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("digits.idx");
        // 2 images of 3x2 u8.
        let mut bytes = vec![0u8, 0, 8, 3];
        for dim in [2u32, 3, 2] {
            bytes.extend_from_slice(&dim.to_be_bytes());
        }
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]);
        std::fs::write(&path, &bytes).unwrap();
        let idx = read_idx(&path).unwrap();
        assert_eq!(idx.dims, vec![2, 3, 2]);
        assert_eq!(idx.data[5], 6);

        std::fs::write(&path, [0u8, 0, 9, 1, 0, 0, 0, 1, 7]).unwrap();
        assert!(read_idx(&path).is_err(), "dtype 9 rejected");
        std::fs::write(&path, [1u8, 0, 8, 1]).unwrap();
        assert!(read_idx(&path).is_err(), "bad magic rejected");
    }
}
