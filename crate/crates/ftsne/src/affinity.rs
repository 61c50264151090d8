//! High-dimensional neighborhood distributions.
//!
//! [`conditional_affinities`] builds the perplexity-calibrated Gaussian
//! conditionals `p(j|i)`, [`symmetrize`] turns them into the joint pair
//! distribution `p_ij = (p(j|i) + p(i|j)) / 2m`, and [`latent_affinity`]
//! builds the latent-space similarity `r(j|i)` used by Z-space metrics.

use crate::error::{FtsneError, Result};
use crate::matrix::{pairwise_squared_distances, Mat};
use rayon::prelude::*;

const LN_2: f64 = std::f64::consts::LN_2;

/// Relative tolerance on the achieved perplexity.
pub const PERPLEXITY_TOL: f64 = 1e-4;

/// Input datapoints with an optional per-point latent value.
#[derive(Debug, Clone)]
pub struct Dataset {
    points: Mat,
    labels: Option<Mat>,
}

impl Dataset {
    /// Validates and wraps raw coordinates plus optional labels
    /// (one label row per point; multi-column labels are allowed for
    /// vector-valued latent spaces).
    pub fn new(points: Mat, labels: Option<Mat>) -> Result<Self> {
        if points.rows() < 2 {
            return Err(FtsneError::Parameter(format!(
                "need at least 2 datapoints, got {}",
                points.rows()
            )));
        }
        if !points.all_finite() {
            return Err(FtsneError::Parameter(
                "dataset contains non-finite coordinates".into(),
            ));
        }
        if let Some(ref l) = labels {
            if l.rows() != points.rows() {
                return Err(FtsneError::Parameter(format!(
                    "label count {} does not match point count {}",
                    l.rows(),
                    points.rows()
                )));
            }
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &Mat {
        &self.points
    }

    pub fn labels(&self) -> Option<&Mat> {
        self.labels.as_ref()
    }
}

/// How latent label values define neighborhoods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    /// Same-class indicator similarity.
    Discrete,
    /// Student-t kernel on latent coordinates.
    Continuous,
}

/// Row-conditional neighbor distribution `p(j|i)` with the calibrated
/// per-point bandwidths.
#[derive(Debug, Clone)]
pub struct ConditionalAffinity {
    rows: Mat,
    sigmas: Vec<f64>,
    perplexity: f64,
}

impl ConditionalAffinity {
    pub fn rows(&self) -> &Mat {
        &self.rows
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn perplexity(&self) -> f64 {
        self.perplexity
    }
}

/// Symmetric joint pair distribution `p_ij`, summing to 1 off-diagonal.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    probs: Mat,
}

impl AffinityMatrix {
    pub fn probs(&self) -> &Mat {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    /// Wraps a precomputed joint matrix; callers must uphold symmetry,
    /// zero diagonal, and unit total mass. Intended for tests and for
    /// synthetic distributions.
    pub fn from_probs(probs: Mat) -> Self {
        Self { probs }
    }
}

/// Row-conditional similarity with rows that must be excluded from
/// averaged metrics (e.g. singleton classes in a discrete latent space).
#[derive(Debug, Clone)]
pub struct SimilarityRows {
    pub rows: Mat,
    pub excluded: Vec<bool>,
}

impl SimilarityRows {
    pub fn without_exclusions(rows: Mat) -> Self {
        let m = rows.rows();
        Self {
            rows,
            excluded: vec![false; m],
        }
    }
}

/// Entropy (nats) of the Gaussian conditional row at log-bandwidth
/// `ln_sigma`, plus the normalized row written into `row`.
///
/// Kernels are shifted by the minimum off-diagonal distance so the row
/// survives arbitrarily small bandwidths without underflowing to zero.
fn row_entropy_nats(d2: &[f64], i: usize, ln_sigma: f64, row: &mut [f64]) -> f64 {
    let beta = 0.5 * (-2.0 * ln_sigma).exp(); // 1 / (2 sigma^2)
    let d_min = d2
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, &d) in d2.iter().enumerate() {
        if j == i {
            row[j] = 0.0;
            continue;
        }
        let shifted = d - d_min;
        let k = (-beta * shifted).exp();
        row[j] = k;
        sum += k;
        weighted += k * shifted;
    }
    for (j, v) in row.iter_mut().enumerate() {
        if j != i {
            *v /= sum;
        }
    }
    // H = ln(sum) + beta * E[d - d_min]
    sum.ln() + beta * weighted / sum
}

/// Calibrates one row: bisection on log sigma so the row entropy matches
/// log2(perplexity), with the initial bracket found by doubling.
fn calibrate_row(d2: &[f64], i: usize, target_nats: f64, row: &mut [f64]) -> Result<f64> {
    if d2
        .iter()
        .enumerate()
        .all(|(j, &d)| j == i || d == 0.0)
    {
        return Err(FtsneError::DegenerateInput {
            row: i,
            reason: "all pairwise distances are zero (duplicate points)".into(),
        });
    }

    let mut lo = 0.0_f64;
    let mut hi = 0.0_f64;
    let h0 = row_entropy_nats(d2, i, 0.0, row);
    if h0 < target_nats {
        // entropy increases with sigma: expand upward
        let mut step = LN_2;
        hi = step;
        let mut k = 0;
        while row_entropy_nats(d2, i, hi, row) < target_nats && k < 64 {
            lo = hi;
            step *= 2.0;
            hi += step;
            k += 1;
        }
    } else {
        let mut step = LN_2;
        lo = -step;
        let mut k = 0;
        while row_entropy_nats(d2, i, lo, row) > target_nats && k < 64 {
            hi = lo;
            step *= 2.0;
            lo -= step;
            k += 1;
        }
    }

    // 64 bisection iterations take the bracket to machine precision, which
    // keeps the result invariant under coordinate rescaling.
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..64 {
        mid = 0.5 * (lo + hi);
        if row_entropy_nats(d2, i, mid, row) < target_nats {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    row_entropy_nats(d2, i, mid, row);
    Ok(mid.exp())
}

/// Builds the perplexity-calibrated conditional distribution `p(j|i)`.
///
/// Each row uses a Gaussian kernel over squared Euclidean distances with
/// a per-point bandwidth found by bisection so that `2^H(p(.|i))` matches
/// the requested perplexity. Rows calibrate independently in parallel.
pub fn conditional_affinities(data: &Dataset, perplexity: f64) -> Result<ConditionalAffinity> {
    let m = data.len();
    if !(perplexity > 1.0 && perplexity < m as f64) {
        return Err(FtsneError::Parameter(format!(
            "perplexity must lie in (1, m) = (1, {m}), got {perplexity}"
        )));
    }
    let d2 = pairwise_squared_distances(data.points());
    let target_nats = perplexity.ln();

    let mut rows = Mat::zeros(m, m);
    let sigmas = rows
        .par_rows_mut()
        .enumerate()
        .map(|(i, row)| calibrate_row(d2.row(i), i, target_nats, row))
        .collect::<Result<Vec<f64>>>()?;

    Ok(ConditionalAffinity {
        rows,
        sigmas,
        perplexity,
    })
}

/// Joint pair distribution `p_ij = (p(j|i) + p(i|j)) / 2m`.
///
/// The result is exactly symmetric (each unordered pair is computed once)
/// with zero diagonal and total off-diagonal mass 1.
pub fn symmetrize(cond: &ConditionalAffinity) -> AffinityMatrix {
    let m = cond.rows.rows();
    let denom = 2.0 * m as f64;
    let mut probs = Mat::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let v = (cond.rows.get(i, j) + cond.rows.get(j, i)) / denom;
            probs.set(i, j, v);
            probs.set(j, i, v);
        }
    }
    AffinityMatrix { probs }
}

/// Row-normalized Student-t similarity `(1 + ||z_i - z_j||^2)^{-1}` over
/// `k != i`. Shared by the continuous latent similarity and the
/// embedding-side conditional used in metrics.
pub fn t_kernel_rows(coords: &Mat) -> Mat {
    let m = coords.rows();
    let d2 = pairwise_squared_distances(coords);
    let mut rows = Mat::zeros(m, m);
    rows.par_rows_mut().enumerate().for_each(|(i, row)| {
        let mut sum = 0.0;
        for (j, slot) in row.iter_mut().enumerate() {
            if i == j {
                continue;
            }
            let w = 1.0 / (1.0 + d2.get(i, j));
            *slot = w;
            sum += w;
        }
        for (j, slot) in row.iter_mut().enumerate() {
            if i != j {
                *slot /= sum;
            }
        }
    });
    rows
}

/// Latent-space similarity `r(j|i)` from per-point labels.
///
/// Discrete: uniform over same-class points, zero elsewhere; a point whose
/// class is a singleton gets an all-zero row and is flagged for exclusion.
/// Continuous: row-normalized Student-t kernel on the latent coordinates.
pub fn latent_affinity(labels: &Mat, kind: LabelKind) -> Result<SimilarityRows> {
    let m = labels.rows();
    if m < 2 {
        return Err(FtsneError::Parameter(
            "need at least 2 labelled points".into(),
        ));
    }
    match kind {
        LabelKind::Continuous => Ok(SimilarityRows::without_exclusions(t_kernel_rows(labels))),
        LabelKind::Discrete => {
            let mut rows = Mat::zeros(m, m);
            let mut excluded = vec![false; m];
            for i in 0..m {
                let same: Vec<usize> = (0..m)
                    .filter(|&j| j != i && labels.row(j) == labels.row(i))
                    .collect();
                if same.is_empty() {
                    excluded[i] = true;
                    continue;
                }
                let w = 1.0 / same.len() as f64;
                for j in same {
                    rows.set(i, j, w);
                }
            }
            Ok(SimilarityRows { rows, excluded })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn achieved_perplexity(row: &[f64]) -> f64 {
        let h_nats: f64 = row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        h_nats.exp()
    }

    fn uniform_cloud(m: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = Mat::from_fn(m, d, |_, _| rng.gen::<f64>());
        Dataset::new(points, None).unwrap()
    }

    #[test]
    fn two_points_single_neighbor_takes_all_mass() {
        let data = Dataset::new(Mat::from_rows(&[vec![0.0], vec![1.0]]), None).unwrap();
        let cond = conditional_affinities(&data, 1.5).unwrap();
        assert_eq!(cond.rows().get(0, 1), 1.0);
        assert_eq!(cond.rows().get(1, 0), 1.0);
    }

    #[test]
    fn three_equidistant_points_give_uniform_rows() {
        // Equilateral triangle with side 1.
        let h = 3.0_f64.sqrt() / 2.0;
        let data = Dataset::new(
            Mat::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, h]]),
            None,
        )
        .unwrap();
        let cond = conditional_affinities(&data, 2.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((cond.rows().get(i, j) - 0.5).abs() < 1e-12);
                }
            }
        }
    }

    /// Independent oracle: dense grid over sigma refined to 1e-8, with its
    /// own naive entropy evaluation.
    fn oracle_sigma(d2_row: &[f64], i: usize, perplexity: f64) -> f64 {
        let naive_perp = |sigma: f64| -> f64 {
            let beta = 1.0 / (2.0 * sigma * sigma);
            let mut ks = vec![0.0; d2_row.len()];
            let mut sum = 0.0;
            for (j, &d) in d2_row.iter().enumerate() {
                if j != i {
                    ks[j] = (-beta * d).exp();
                    sum += ks[j];
                }
            }
            let mut h = 0.0;
            for (j, k) in ks.iter().enumerate() {
                if j != i && *k > 0.0 {
                    let p = k / sum;
                    h -= p * p.log2();
                }
            }
            2.0_f64.powf(h)
        };
        let (mut lo, mut hi) = (1e-3_f64, 1e3_f64);
        // locate the straddling cell on a coarse grid, then refine
        let mut grid: Vec<f64> = (0..=100)
            .map(|k| lo * (hi / lo).powf(k as f64 / 100.0))
            .collect();
        loop {
            let mut found = false;
            for w in grid.windows(2) {
                if naive_perp(w[0]) <= perplexity && perplexity <= naive_perp(w[1]) {
                    lo = w[0];
                    hi = w[1];
                    found = true;
                    break;
                }
            }
            assert!(found, "oracle failed to bracket sigma");
            if hi - lo < 1e-8 {
                return 0.5 * (lo + hi);
            }
            grid = (0..=100).map(|k| lo + (hi - lo) * k as f64 / 100.0).collect();
        }
    }

    #[test]
    fn calibration_hits_target_perplexity_and_oracle_sigma() {
        let data = uniform_cloud(100, 2, 42);
        let perp = 10.0;
        let cond = conditional_affinities(&data, perp).unwrap();
        let d2 = pairwise_squared_distances(data.points());
        for i in 0..data.len() {
            let got = achieved_perplexity(cond.rows().row(i));
            assert!(
                (got - perp).abs() <= PERPLEXITY_TOL * perp,
                "row {i}: perplexity {got}"
            );
            let oracle = oracle_sigma(d2.row(i), i, perp);
            assert!(
                (cond.sigmas()[i] - oracle).abs() < 2e-8,
                "row {i}: sigma {} vs oracle {oracle}",
                cond.sigmas()[i]
            );
        }
    }

    #[test]
    fn rows_are_stochastic_with_zero_diagonal() {
        let data = uniform_cloud(60, 3, 7);
        let cond = conditional_affinities(&data, 12.0).unwrap();
        for i in 0..60 {
            let row = cond.rows().row(i);
            assert_eq!(row[i], 0.0);
            assert!(row.iter().all(|&p| p >= 0.0));
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-10, "row {i} sums to {s}");
        }
    }

    #[test]
    fn scale_invariance_of_conditionals() {
        let data = uniform_cloud(40, 2, 3);
        let cond = conditional_affinities(&data, 8.0).unwrap();
        let c = 37.5;
        let scaled_pts = Mat::from_fn(40, 2, |i, j| c * data.points().get(i, j));
        let scaled = Dataset::new(scaled_pts, None).unwrap();
        let cond2 = conditional_affinities(&scaled, 8.0).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                assert!(
                    (cond.rows().get(i, j) - cond2.rows().get(i, j)).abs() < 1e-8,
                    "entry ({i},{j})"
                );
            }
            // bandwidths rescale by c
            assert!((cond2.sigmas()[i] / cond.sigmas()[i] - c).abs() < 1e-6 * c);
        }
    }

    #[test]
    fn perplexity_out_of_range_is_rejected() {
        let data = uniform_cloud(10, 2, 0);
        assert!(matches!(
            conditional_affinities(&data, 1.0),
            Err(FtsneError::Parameter(_))
        ));
        assert!(matches!(
            conditional_affinities(&data, 10.0),
            Err(FtsneError::Parameter(_))
        ));
        assert!(conditional_affinities(&data, 9.99).is_ok());
    }

    #[test]
    fn duplicate_points_name_the_degenerate_row() {
        let data = Dataset::new(
            Mat::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]),
            None,
        )
        .unwrap();
        match conditional_affinities(&data, 1.5) {
            Err(FtsneError::DegenerateInput { row, .. }) => assert!(row < 3),
            other => panic!("expected degenerate-input error, got {other:?}"),
        }
    }

    #[test]
    fn symmetrize_two_points() {
        let data = Dataset::new(Mat::from_rows(&[vec![0.0], vec![1.0]]), None).unwrap();
        let cond = conditional_affinities(&data, 1.5).unwrap();
        let joint = symmetrize(&cond);
        assert_eq!(joint.probs().get(0, 1), 0.5);
        assert_eq!(joint.probs().get(1, 0), 0.5);
    }

    #[test]
    fn symmetrize_matches_brute_force_and_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points = Mat::from_fn(50, 4, |_, _| rng.gen::<f64>() * 3.0 - 1.5);
        let data = Dataset::new(points, None).unwrap();
        let cond = conditional_affinities(&data, 5.0).unwrap();
        let joint = symmetrize(&cond);
        let m = 50;
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                let expect = if i == j {
                    0.0
                } else {
                    (cond.rows().get(i, j) + cond.rows().get(j, i)) / (2.0 * m as f64)
                };
                assert!((joint.probs().get(i, j) - expect).abs() < 1e-12);
                assert_eq!(joint.probs().get(i, j), joint.probs().get(j, i));
                total += joint.probs().get(i, j);
            }
        }
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn symmetrize_commutes_with_permutation() {
        let data = uniform_cloud(20, 2, 5);
        let cond = conditional_affinities(&data, 4.0).unwrap();
        let joint = symmetrize(&cond);

        // permute points by reversal
        let m = data.len();
        let perm: Vec<usize> = (0..m).rev().collect();
        let permuted_pts = Mat::from_fn(m, 2, |i, j| data.points().get(perm[i], j));
        let permuted = Dataset::new(permuted_pts, None).unwrap();
        let joint_p = symmetrize(&conditional_affinities(&permuted, 4.0).unwrap());
        for i in 0..m {
            for j in 0..m {
                assert!(
                    (joint_p.probs().get(i, j) - joint.probs().get(perm[i], perm[j])).abs() < 1e-12
                );
            }
        }
    }

    #[test]
    fn discrete_latent_rows() {
        // labels [A, A, B]: the B point has no same-class neighbor.
        let labels = Mat::from_rows(&[vec![0.0], vec![0.0], vec![1.0]]);
        let r = latent_affinity(&labels, LabelKind::Discrete).unwrap();
        assert_eq!(r.rows.get(0, 1), 1.0);
        assert_eq!(r.rows.get(0, 2), 0.0);
        assert!(r.excluded[2]);
        assert!(!r.excluded[0]);

        let same = Mat::from_rows(&vec![vec![7.0]; 4]);
        let r = latent_affinity(&same, LabelKind::Discrete).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!((r.rows.get(i, j) - 1.0 / 3.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn continuous_latent_uses_t_kernel() {
        // z = [0, 1, 3]: r(2|1) = (1/2) / (1/2 + 1/10) = 5/6.
        let labels = Mat::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]);
        let r = latent_affinity(&labels, LabelKind::Continuous).unwrap();
        assert!((r.rows.get(0, 1) - 5.0 / 6.0).abs() < 1e-12);
        assert!(r.excluded.iter().all(|&e| !e));
    }
}
