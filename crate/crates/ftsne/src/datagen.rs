//! Synthetic benchmark datasets with ground-truth latent values.

use crate::affinity::Dataset;
use crate::error::{FtsneError, Result};
use crate::matrix::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Parameter range of the swiss-roll spiral.
pub const SWISS_ROLL_T_RANGE: (f64, f64) = (1.5 * std::f64::consts::PI, 4.5 * std::f64::consts::PI);
/// Height range of the swiss-roll sheet.
pub const SWISS_ROLL_HEIGHT: f64 = 21.0;

/// 3-D swiss roll: `(t cos t, h, t sin t)` with `t ~ U(1.5pi, 4.5pi)` and
/// `h ~ U(0, 21)`, plus isotropic Gaussian noise. The continuous label is
/// the arc parameter `t`.
pub fn swiss_roll(m: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if m < 10 {
        return Err(FtsneError::Parameter(format!(
            "swiss roll needs m >= 10, got {m}"
        )));
    }
    if noise < 0.0 {
        return Err(FtsneError::Parameter(format!(
            "noise must be >= 0, got {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid stddev");
    let (t_lo, t_hi) = SWISS_ROLL_T_RANGE;
    let mut points = Mat::zeros(m, 3);
    let mut labels = Mat::zeros(m, 1);
    for i in 0..m {
        let t = rng.gen_range(t_lo..t_hi);
        let h = rng.gen_range(0.0..SWISS_ROLL_HEIGHT);
        let mut p = [t * t.cos(), h, t * t.sin()];
        if noise > 0.0 {
            for v in &mut p {
                *v += normal.sample(&mut rng);
            }
        }
        for (k, &v) in p.iter().enumerate() {
            points.set(i, k, v);
        }
        labels.set(i, 0, t);
    }
    Dataset::new(points, Some(labels))
}

/// Three isotropic Gaussian blobs in 2-D, centered on the vertices of an
/// equilateral triangle with the given side length. Points are assigned
/// to blobs round-robin; the discrete label is the blob index.
pub fn gaussian_blobs(m: usize, separation: f64, std: f64, seed: u64) -> Result<Dataset> {
    if m < 10 {
        return Err(FtsneError::Parameter(format!(
            "gaussian blobs need m >= 10, got {m}"
        )));
    }
    if separation <= 0.0 || std < 0.0 {
        return Err(FtsneError::Parameter(format!(
            "need separation > 0 and std >= 0, got {separation} and {std}"
        )));
    }
    let centers = [
        [0.0, 0.0],
        [separation, 0.0],
        [separation / 2.0, separation * 3.0_f64.sqrt() / 2.0],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("valid stddev");
    let mut points = Mat::zeros(m, 2);
    let mut labels = Mat::zeros(m, 1);
    for i in 0..m {
        let blob = i % 3;
        for k in 0..2 {
            let jitter = if std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            points.set(i, k, centers[blob][k] + jitter);
        }
        labels.set(i, 0, blob as f64);
    }
    Dataset::new(points, Some(labels))
}
