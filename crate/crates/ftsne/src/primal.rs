//! Primal embedding objective and its gradient-descent optimizer.
//!
//! The embedding distribution is the normalized Student-t kernel
//! `q_ij = W_ij / Z` with `W_ij = (1 + ||y_i - y_j||^2)^{-1}` and
//! `Z = sum_{k != l} W_kl` over ordered pairs (joint convention, matching
//! the pair space of the symmetrized data affinities).
//!
//! The analytic gradient of `J = sum q f(p/q)` follows from the chain
//! rule through the normalizer: with `g_ij = f(t) - t f'(t)` at
//! `t = p_ij / q_ij` and `<g> = sum g_kl q_kl`,
//!
//! ```text
//! dJ/dy_i = -4 sum_j (g_ij - <g>) (W_ij^2 / Z) (y_i - y_j)
//! ```
//!
//! which reduces to the classical `4 sum (p - q) W (y_i - y_j)` for KL.

use crate::affinity::AffinityMatrix;
use crate::divergence::Divergence;
use crate::error::{FtsneError, Result};
use crate::matrix::{pairwise_sum, Mat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// Standard deviation of the random embedding initialization.
pub const INIT_STDDEV: f64 = 1e-4;

/// Per-point gradient norm cap; a guard against runaway steps.
pub const GRADIENT_CLIP_NORM: f64 = 1e6;

/// Low-dimensional coordinates being optimized, plus momentum state.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    coords: Mat,
    velocity: Mat,
    epoch: usize,
}

impl Embedding {
    pub fn coords(&self) -> &Mat {
        &self.coords
    }

    pub fn velocity(&self) -> &Mat {
        &self.velocity
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.coords.cols()
    }

    /// Wraps explicit coordinates with zeroed momentum (for tests and
    /// resuming from file).
    pub fn from_coords(coords: Mat) -> Self {
        let velocity = Mat::zeros(coords.rows(), coords.cols());
        Self {
            coords,
            velocity,
            epoch: 0,
        }
    }

    pub(crate) fn coords_mut(&mut self) -> &mut Mat {
        &mut self.coords
    }

    pub(crate) fn velocity_mut(&mut self) -> &mut Mat {
        &mut self.velocity
    }

    pub(crate) fn bump_epoch(&mut self) {
        self.epoch += 1;
    }
}

/// Learning-rate and momentum schedule with multiplicative-inverse decay:
/// `lr(t) = lr0 / (1 + t / lr_decay)` and likewise for momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSchedule {
    pub lr0: f64,
    pub momentum0: f64,
    pub lr_decay: f64,
    pub momentum_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimizerSchedule {
    fn default() -> Self {
        Self {
            lr0: 100.0,
            momentum0: 0.5,
            lr_decay: 500.0,
            momentum_decay: 500.0,
            epochs: 1000,
            seed: 0,
        }
    }
}

impl OptimizerSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr0", self.lr0),
            ("momentum0", self.momentum0),
            ("lr_decay", self.lr_decay),
            ("momentum_decay", self.momentum_decay),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FtsneError::Parameter(format!(
                    "schedule field {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr0 / (1.0 + t as f64 / self.lr_decay)
    }

    pub fn momentum_at(&self, t: usize) -> f64 {
        self.momentum0 / (1.0 + t as f64 / self.momentum_decay)
    }
}

/// Student-t pair distribution of an embedding: joint probabilities, the
/// unnormalized kernels, and their total mass.
#[derive(Debug, Clone)]
pub struct LowDimAffinity {
    probs: Mat,
    kernels: Mat,
    normalizer: f64,
}

impl LowDimAffinity {
    pub fn probs(&self) -> &Mat {
        &self.probs
    }

    pub fn kernels(&self) -> &Mat {
        &self.kernels
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }
}

/// Draws the initial embedding from N(0, 1e-4^2), deterministically for a
/// given seed, with zeroed momentum.
pub fn init_embedding(m: usize, d: usize, seed: u64) -> Result<Embedding> {
    if m < 2 {
        return Err(FtsneError::Parameter(format!(
            "need at least 2 points, got {m}"
        )));
    }
    if !(1..=3).contains(&d) {
        return Err(FtsneError::Parameter(format!(
            "embedding dimension must be 1, 2 or 3, got {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STDDEV).expect("valid stddev");
    let mut coords = Mat::zeros(m, d);
    for v in coords.data_mut() {
        *v = normal.sample(&mut rng);
    }
    Ok(Embedding {
        coords,
        velocity: Mat::zeros(m, d),
        epoch: 0,
    })
}

/// Computes the Student-t pair distribution of the given coordinates.
pub fn low_dim_affinity(coords: &Mat) -> LowDimAffinity {
    let m = coords.rows();
    let mut kernels = Mat::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let w = 1.0 / (1.0 + crate::matrix::squared_distance(coords.row(i), coords.row(j)));
            kernels.set(i, j, w);
            kernels.set(j, i, w);
        }
    }
    let row_sums: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in 0..m {
                s += kernels.get(i, j);
            }
            s
        })
        .collect();
    let normalizer = pairwise_sum(&row_sums);
    let mut probs = kernels.clone();
    probs.data_mut().iter_mut().for_each(|v| *v /= normalizer);
    LowDimAffinity {
        probs,
        kernels,
        normalizer,
    }
}

/// Primal loss `D_f(P || Q)` of the embedding under `div`.
pub fn primal_loss(div: Divergence, p: &AffinityMatrix, emb: &Embedding) -> Result<f64> {
    let low = low_dim_affinity(emb.coords());
    crate::divergence::primal_divergence(div, p.probs(), low.probs())
}

/// Fused pass over all pairs: the primal loss plus the full matrix of
/// gradient coefficients `g_ij = f(t) - t f'(t)` and their q-weighted
/// mean `<g> = sum g_kl q_kl`.
fn loss_and_coefficients(
    div: Divergence,
    p: &Mat,
    low: &LowDimAffinity,
) -> Result<(f64, Mat, f64)> {
    let m = p.rows();
    let mut coef = Mat::zeros(m, m);
    let partials = coef
        .par_rows_mut()
        .enumerate()
        .map(|(i, row)| {
            let mut loss = 0.0;
            let mut gq = 0.0;
            for (j, slot) in row.iter_mut().enumerate() {
                if i == j {
                    continue;
                }
                let qv = low.probs.get(i, j);
                let (l, g) = div.pair_terms(p.get(i, j), qv)?;
                loss += l;
                gq += g * qv;
                *slot = g;
            }
            Ok((loss, gq))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let losses: Vec<f64> = partials.iter().map(|&(l, _)| l).collect();
    let gqs: Vec<f64> = partials.iter().map(|&(_, g)| g).collect();
    Ok((pairwise_sum(&losses), coef, pairwise_sum(&gqs)))
}

/// Shared kernel for both optimizers: rows of
/// `sign * 4 * sum_j (coef_ij - mean) (W_ij^2 / Z) (y_i - y_j)`.
pub(crate) fn weighted_pair_gradient(
    coords: &Mat,
    low: &LowDimAffinity,
    coef: &Mat,
    mean: f64,
    sign: f64,
) -> Mat {
    let m = coords.rows();
    let d = coords.cols();
    let inv_z = 1.0 / low.normalizer;
    let mut grad = Mat::zeros(m, d);
    grad.par_rows_mut().enumerate().for_each(|(i, out)| {
        let yi = coords.row(i);
        for j in 0..m {
            if i == j {
                continue;
            }
            let w = low.kernels.get(i, j);
            let scale = sign * 4.0 * (coef.get(i, j) - mean) * (w * w * inv_z);
            let yj = coords.row(j);
            for k in 0..d {
                out[k] += scale * (yi[k] - yj[k]);
            }
        }
    });
    grad
}

/// Exact analytic gradient of the primal loss with respect to the
/// embedding coordinates.
pub fn primal_gradient(div: Divergence, p: &AffinityMatrix, emb: &Embedding) -> Result<Mat> {
    let low = low_dim_affinity(emb.coords());
    let (_, coef, mean_g) = loss_and_coefficients(div, p.probs(), &low)?;
    Ok(weighted_pair_gradient(
        emb.coords(),
        &low,
        &coef,
        mean_g,
        -1.0,
    ))
}

/// Caps each gradient row at `GRADIENT_CLIP_NORM`; returns how many rows
/// were clipped.
pub(crate) fn clip_gradient_rows(grad: &mut Mat) -> u64 {
    let mut events = 0;
    for i in 0..grad.rows() {
        let row = grad.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > GRADIENT_CLIP_NORM {
            let s = GRADIENT_CLIP_NORM / norm;
            row.iter_mut().for_each(|v| *v *= s);
            events += 1;
        }
    }
    events
}

/// Options for [`run_primal`] beyond the schedule itself.
#[derive(Debug, Clone)]
pub struct PrimalOptions {
    /// Record the loss every this many epochs.
    pub trace_every: usize,
    /// Optional early exaggeration: multiply P by `.0` for the first `.1`
    /// epochs. Off by default.
    pub exaggeration: Option<(f64, usize)>,
}

impl Default for PrimalOptions {
    fn default() -> Self {
        Self {
            trace_every: 1,
            exaggeration: None,
        }
    }
}

/// Result of a primal optimization run.
#[derive(Debug, Clone)]
pub struct PrimalRun {
    pub embedding: Embedding,
    /// `(epoch, loss)` pairs, loss evaluated before the epoch's update.
    pub trace: Vec<(usize, f64)>,
    pub clip_events: u64,
}

/// Momentum gradient descent on the primal loss.
///
/// Per epoch `t`: `v <- momentum(t) * v - lr(t) * grad`, `y <- y + v`.
/// A NaN or infinite loss/coordinate aborts with the epoch index and the
/// last finite coordinates.
pub fn run_primal(
    div: Divergence,
    p: &AffinityMatrix,
    schedule: &OptimizerSchedule,
    d: usize,
    options: &PrimalOptions,
) -> Result<PrimalRun> {
    schedule.validate()?;
    if options.trace_every == 0 {
        return Err(FtsneError::Parameter("trace_every must be >= 1".into()));
    }
    let m = p.len();
    let mut emb = init_embedding(m, d, schedule.seed)?;
    let exaggerated = options.exaggeration.map(|(factor, epochs)| {
        let mut scaled = p.probs().clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= factor);
        (scaled, epochs)
    });

    let mut trace = Vec::new();
    let mut clip_events = 0;
    for t in 0..schedule.epochs {
        let low = low_dim_affinity(emb.coords());
        let effective_p = match &exaggerated {
            Some((scaled, until)) if t < *until => scaled,
            _ => p.probs(),
        };
        let (loss, coef, mean_g) = if std::ptr::eq(effective_p, p.probs()) {
            loss_and_coefficients(div, p.probs(), &low)?
        } else {
            // during exaggeration the trace still records the true loss
            let (loss, _, _) = loss_and_coefficients(div, p.probs(), &low)?;
            let (_, coef, mean_g) = loss_and_coefficients(div, effective_p, &low)?;
            (loss, coef, mean_g)
        };
        if loss.is_nan() || loss.is_infinite() {
            return Err(FtsneError::NumericAbort {
                step: t,
                reason: format!("loss became {loss}"),
                last_good: Some(Box::new(emb.coords.clone())),
            });
        }
        if t % options.trace_every == 0 {
            trace.push((t, loss));
        }

        let mut grad = weighted_pair_gradient(emb.coords(), &low, &coef, mean_g, -1.0);
        clip_events += clip_gradient_rows(&mut grad);

        let lr = schedule.lr_at(t);
        let momentum = schedule.momentum_at(t);
        let before = emb.coords.clone();
        for idx in 0..emb.velocity.data().len() {
            let v = momentum * emb.velocity.data()[idx] - lr * grad.data()[idx];
            emb.velocity.data_mut()[idx] = v;
            emb.coords.data_mut()[idx] += v;
        }
        if !emb.coords.all_finite() {
            return Err(FtsneError::NumericAbort {
                step: t,
                reason: "embedding coordinates became non-finite".into(),
                last_good: Some(Box::new(before)),
            });
        }
        emb.epoch += 1;
    }

    Ok(PrimalRun {
        embedding: emb,
        trace,
        clip_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::NAMED_DIVERGENCES;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random symmetric pair distribution with strictly positive
    /// off-diagonal mass.
    fn random_affinity(m: usize, seed: u64) -> AffinityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut probs = Mat::zeros(m, m);
        let mut total = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                let v = rng.gen::<f64>() + 0.05;
                probs.set(i, j, v);
                probs.set(j, i, v);
                total += 2.0 * v;
            }
        }
        probs.data_mut().iter_mut().for_each(|v| *v /= total);
        AffinityMatrix::from_probs(probs)
    }

    fn random_embedding(m: usize, d: usize, seed: u64) -> Embedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Embedding::from_coords(Mat::from_fn(m, d, |_, _| rng.gen::<f64>() * 2.0 - 1.0))
    }

    #[test]
    fn init_is_deterministic_with_zero_velocity() {
        let a = init_embedding(50, 2, 9).unwrap();
        let b = init_embedding(50, 2, 9).unwrap();
        assert_eq!(a.coords(), b.coords());
        assert!(a.velocity().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.epoch(), 0);
    }

    #[test]
    fn init_sample_std_matches_spec() {
        let emb = init_embedding(1000, 2, 123).unwrap();
        let n = emb.coords().data().len() as f64;
        let mean: f64 = emb.coords().data().iter().sum::<f64>() / n;
        let var: f64 = emb
            .coords()
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        assert!((0.8e-4..=1.2e-4).contains(&std), "std = {std}");
    }

    #[test]
    fn init_rejects_bad_dimension() {
        assert!(init_embedding(10, 0, 0).is_err());
        assert!(init_embedding(10, 4, 0).is_err());
        assert!(init_embedding(1, 2, 0).is_err());
    }

    #[test]
    fn coincident_points_split_mass_evenly() {
        let emb = Embedding::from_coords(Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]));
        let low = low_dim_affinity(emb.coords());
        assert_eq!(low.probs().get(0, 1), 0.5);
        assert_eq!(low.probs().get(1, 0), 0.5);
    }

    #[test]
    fn collinear_points_hand_value() {
        // y = 0, 1, 2 on a line: W = 1/2, 1/5, 1/2 per unordered pair,
        // Z = 2 * 1.2, q_01 = (1/2) / 2.4 = 5/24.
        let emb = Embedding::from_coords(Mat::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]));
        let low = low_dim_affinity(emb.coords());
        assert!((low.probs().get(0, 1) - 5.0 / 24.0).abs() < 1e-15);
        assert!((low.normalizer() - 2.4).abs() < 1e-15);
    }

    #[test]
    fn low_dim_affinity_sums_to_one() {
        let emb = random_embedding(40, 2, 4);
        let low = low_dim_affinity(emb.coords());
        let total: f64 = low.probs().data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_matching_distributions() {
        let emb = random_embedding(12, 2, 8);
        let low = low_dim_affinity(emb.coords());
        let p = AffinityMatrix::from_probs(low.probs().clone());
        for div in NAMED_DIVERGENCES {
            let grad = primal_gradient(div, &p, &emb).unwrap();
            let max = grad.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            assert!(max < 1e-10, "{div}: max |grad| = {max}");
        }
    }

    /// Central finite difference of the primal loss, the independent
    /// oracle for the analytic gradient.
    fn fd_gradient(div: Divergence, p: &AffinityMatrix, emb: &Embedding, h: f64) -> Mat {
        let mut out = Mat::zeros(emb.len(), emb.dim());
        for i in 0..emb.len() {
            for k in 0..emb.dim() {
                let mut plus = emb.clone();
                plus.coords.set(i, k, emb.coords().get(i, k) + h);
                let mut minus = emb.clone();
                minus.coords.set(i, k, emb.coords().get(i, k) - h);
                let fp = primal_loss(div, p, &plus).unwrap();
                let fm = primal_loss(div, p, &minus).unwrap();
                out.set(i, k, (fp - fm) / (2.0 * h));
            }
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut divs = NAMED_DIVERGENCES.to_vec();
        divs.extend([
            Divergence::Interpolated(0.05),
            Divergence::Interpolated(0.1),
            Divergence::Interpolated(0.5),
        ]);
        for (instance, &m) in [5usize, 10].iter().enumerate() {
            let p = random_affinity(m, 100 + instance as u64);
            let emb = random_embedding(m, 2, 200 + instance as u64);
            for &div in &divs {
                let analytic = primal_gradient(div, &p, &emb).unwrap();
                let fd = fd_gradient(div, &p, &emb, 1e-5);
                for idx in 0..analytic.data().len() {
                    let (a, f) = (analytic.data()[idx], fd.data()[idx]);
                    let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
                    assert!(rel < 1e-4, "{div} coord {idx}: analytic {a} vs fd {f}");
                }
            }
        }
    }

    #[test]
    fn kl_gradient_matches_classical_form() {
        // Independent specialization: 4 sum_j (p - q) W (y_i - y_j).
        let p = random_affinity(4, 77);
        let emb = random_embedding(4, 2, 78);
        let low = low_dim_affinity(emb.coords());
        let grad = primal_gradient(Divergence::Kl, &p, &emb).unwrap();
        for i in 0..4 {
            for k in 0..2 {
                let mut expect = 0.0;
                for j in 0..4 {
                    if i == j {
                        continue;
                    }
                    expect += 4.0
                        * (p.probs().get(i, j) - low.probs().get(i, j))
                        * low.kernels().get(i, j)
                        * (emb.coords().get(i, k) - emb.coords().get(j, k));
                }
                assert!(
                    (grad.get(i, k) - expect).abs() < 1e-12,
                    "({i},{k}): {} vs {expect}",
                    grad.get(i, k)
                );
            }
        }
    }

    #[test]
    fn loss_is_translation_and_rotation_invariant() {
        let p = random_affinity(15, 5);
        let emb = random_embedding(15, 2, 6);
        let base = primal_loss(Divergence::Js, &p, &emb).unwrap();

        let shifted = Embedding::from_coords(Mat::from_fn(15, 2, |i, k| {
            emb.coords().get(i, k) + if k == 0 { 3.7 } else { -1.2 }
        }));
        let l_shift = primal_loss(Divergence::Js, &p, &shifted).unwrap();
        assert!((l_shift - base).abs() < 1e-12);

        let theta = 0.83_f64;
        let (c, s) = (theta.cos(), theta.sin());
        let rotated = Embedding::from_coords(Mat::from_fn(15, 2, |i, k| {
            let (x, y) = (emb.coords().get(i, 0), emb.coords().get(i, 1));
            if k == 0 {
                c * x - s * y
            } else {
                s * x + c * y
            }
        }));
        let l_rot = primal_loss(Divergence::Js, &p, &rotated).unwrap();
        assert!((l_rot - base).abs() < 1e-10);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let p = random_affinity(12, 21);
        let emb = random_embedding(12, 2, 22);
        for div in NAMED_DIVERGENCES {
            let grad = primal_gradient(div, &p, &emb).unwrap();
            for k in 0..2 {
                let s: f64 = (0..12).map(|i| grad.get(i, k)).sum();
                assert!(s.abs() < 1e-9, "{div} axis {k}: sum {s}");
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initial_embedding() {
        let p = random_affinity(10, 30);
        let schedule = OptimizerSchedule {
            epochs: 0,
            seed: 3,
            ..Default::default()
        };
        let run = run_primal(Divergence::Kl, &p, &schedule, 2, &PrimalOptions::default()).unwrap();
        let init = init_embedding(10, 2, 3).unwrap();
        assert_eq!(run.embedding.coords(), init.coords());
        assert!(run.trace.is_empty());
    }

    #[test]
    fn run_is_deterministic_and_loss_decreases() {
        let p = random_affinity(30, 40);
        let schedule = OptimizerSchedule {
            epochs: 60,
            seed: 5,
            lr0: 10.0,
            ..Default::default()
        };
        let a = run_primal(Divergence::Kl, &p, &schedule, 2, &PrimalOptions::default()).unwrap();
        let b = run_primal(Divergence::Kl, &p, &schedule, 2, &PrimalOptions::default()).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.embedding.coords(), b.embedding.coords());
        let first = a.trace.first().unwrap().1;
        let last = a.trace.last().unwrap().1;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn trace_row_count_matches_contract() {
        let p = random_affinity(10, 50);
        let schedule = OptimizerSchedule {
            epochs: 200,
            lr0: 1.0,
            ..Default::default()
        };
        let options = PrimalOptions {
            trace_every: 10,
            ..Default::default()
        };
        let run = run_primal(Divergence::Hl, &p, &schedule, 2, &options).unwrap();
        assert_eq!(run.trace.len(), 20);
    }
}
