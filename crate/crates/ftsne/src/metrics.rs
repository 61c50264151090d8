//! Neighborhood-retrieval quality metrics.
//!
//! Threshold metrics compare neighbor sets obtained by cutting the
//! row-conditional similarities `p(j|i)`, `q(j|i)` and `r(j|i)` at a
//! common threshold; K-nearest/K-farthest metrics compare rank
//! neighborhoods under Euclidean distance. The binary-neighborhood model
//! evaluates each divergence exactly on a four-cell similarity pattern
//! and provides the leading-order closed-form predictions for
//! comparison.

use crate::affinity::SimilarityRows;
use crate::divergence::Divergence;
use crate::error::{FtsneError, Result};
use crate::matrix::{squared_distance, Mat};
use rayon::prelude::*;

/// Precision/recall/F-score values swept over a threshold or
/// neighborhood-size parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalCurves {
    /// Threshold values, or K values cast to f64.
    pub params: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub fscore: Vec<f64>,
    pub max_fscore: f64,
}

impl RetrievalCurves {
    fn from_columns(params: Vec<f64>, precision: Vec<f64>, recall: Vec<f64>) -> Self {
        let fscore: Vec<f64> = precision
            .iter()
            .zip(&recall)
            .map(|(&p, &r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
            .collect();
        let max_fscore = fscore.iter().copied().fold(0.0, f64::max);
        Self {
            params,
            precision,
            recall,
            fscore,
            max_fscore,
        }
    }
}

/// Number of thresholds in the default epsilon grid.
pub const EPSILON_GRID_SIZE: usize = 50;

/// Default threshold grid: log-spaced between the 1st and 99th percentile
/// of the pooled positive off-diagonal similarities.
pub fn default_epsilon_grid(similarity_matrices: &[&Mat]) -> Vec<f64> {
    let mut vals: Vec<f64> = Vec::new();
    for m in similarity_matrices {
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                if i != j && m.get(i, j) > 0.0 {
                    vals.push(m.get(i, j));
                }
            }
        }
    }
    if vals.is_empty() {
        return vec![0.5];
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pick = |q: f64| vals[((vals.len() - 1) as f64 * q).round() as usize];
    let lo = pick(0.01);
    let mut hi = pick(0.99);
    if hi <= lo {
        hi = lo * (1.0 + 1e-9);
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..EPSILON_GRID_SIZE)
        .map(|i| (llo + (lhi - llo) * i as f64 / (EPSILON_GRID_SIZE - 1) as f64).exp())
        .collect()
}

/// Neighbor sets by similarity threshold: `N_eps(i) = { j != i : s(j|i) > eps }`.
pub fn threshold_neighbors(rows: &Mat, eps: f64) -> Vec<Vec<usize>> {
    (0..rows.rows())
        .map(|i| {
            (0..rows.cols())
                .filter(|&j| j != i && rows.get(i, j) > eps)
                .collect()
        })
        .collect()
}

fn pr_at_threshold(truth: &SimilarityRows, retrieved: &Mat, eps: f64) -> (f64, f64, usize) {
    let m = retrieved.rows();
    let mut prec_sum = 0.0;
    let mut rec_sum = 0.0;
    let mut counted = 0;
    for i in 0..m {
        if truth.excluded[i] {
            continue;
        }
        counted += 1;
        let mut n_true = 0usize;
        let mut n_retr = 0usize;
        let mut inter = 0usize;
        for j in 0..m {
            if j == i {
                continue;
            }
            let is_true = truth.rows.get(i, j) > eps;
            let is_retr = retrieved.get(i, j) > eps;
            n_true += is_true as usize;
            n_retr += is_retr as usize;
            inter += (is_true && is_retr) as usize;
        }
        // vacuous retrieval is error-free: empty sets contribute 1
        prec_sum += if n_retr == 0 {
            1.0
        } else {
            inter as f64 / n_retr as f64
        };
        rec_sum += if n_true == 0 {
            1.0
        } else {
            inter as f64 / n_true as f64
        };
    }
    (prec_sum, rec_sum, counted)
}

fn pr_curve(truth: &SimilarityRows, retrieved: &Mat, eps_grid: &[f64]) -> Result<RetrievalCurves> {
    if truth.rows.rows() != retrieved.rows() {
        return Err(FtsneError::Parameter(format!(
            "similarity sizes differ: {} vs {}",
            truth.rows.rows(),
            retrieved.rows()
        )));
    }
    if truth.excluded.iter().all(|&e| e) {
        return Err(FtsneError::Parameter(
            "every row is excluded from the latent similarity".into(),
        ));
    }
    let results: Vec<(f64, f64, usize)> = eps_grid
        .par_iter()
        .map(|&eps| pr_at_threshold(truth, retrieved, eps))
        .collect();
    let mut precision = Vec::with_capacity(eps_grid.len());
    let mut recall = Vec::with_capacity(eps_grid.len());
    for (p, r, n) in results {
        precision.push(p / n as f64);
        recall.push(r / n as f64);
    }
    Ok(RetrievalCurves::from_columns(
        eps_grid.to_vec(),
        precision,
        recall,
    ))
}

/// Data-vs-embedding precision/recall over a threshold grid, treating the
/// data-space neighbors as ground truth.
pub fn pr_curve_xy(
    p_cond: &Mat,
    q_cond: &Mat,
    eps_grid: &[f64],
) -> Result<RetrievalCurves> {
    let truth = SimilarityRows::without_exclusions(p_cond.clone());
    pr_curve(&truth, q_cond, eps_grid)
}

/// Latent-vs-embedding precision/recall; rows flagged in the latent
/// similarity (singleton classes) are excluded from the averages.
pub fn pr_curve_zy(
    r_cond: &SimilarityRows,
    q_cond: &Mat,
    eps_grid: &[f64],
) -> Result<RetrievalCurves> {
    pr_curve(r_cond, q_cond, eps_grid)
}

/// Indices of all other points ordered by Euclidean distance from point
/// `i` (nearest first when `farthest_first` is false), distance ties
/// broken by lower index.
fn distance_order(points: &Mat, i: usize, farthest_first: bool) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = (0..points.rows())
        .filter(|&j| j != i)
        .map(|j| (squared_distance(points.row(i), points.row(j)), j))
        .collect();
    if farthest_first {
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    } else {
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    }
    order.into_iter().map(|(_, j)| j).collect()
}

/// K-nearest and K-farthest neighbor agreement between the data space and
/// the embedding, swept over `k_grid`.
///
/// `precision` carries NN-Precision(K), `recall` carries FN-Precision(K);
/// the F-score column is their harmonic mean.
pub fn knn_kfn_curve(
    data_points: &Mat,
    emb_coords: &Mat,
    k_grid: &[usize],
) -> Result<RetrievalCurves> {
    let m = data_points.rows();
    if emb_coords.rows() != m {
        return Err(FtsneError::Parameter(format!(
            "row counts differ: data {m} vs embedding {}",
            emb_coords.rows()
        )));
    }
    if k_grid.iter().any(|&k| k == 0 || k >= m) {
        return Err(FtsneError::Parameter(format!(
            "every K must satisfy 1 <= K < m = {m}"
        )));
    }
    struct PointOrders {
        x_near: Vec<usize>,
        y_near: Vec<usize>,
        x_far: Vec<usize>,
        y_far: Vec<usize>,
    }
    let orders: Vec<PointOrders> = (0..m)
        .into_par_iter()
        .map(|i| PointOrders {
            x_near: distance_order(data_points, i, false),
            y_near: distance_order(emb_coords, i, false),
            x_far: distance_order(data_points, i, true),
            y_far: distance_order(emb_coords, i, true),
        })
        .collect();

    let overlap = |a: &[usize], b: &[usize], k: usize| -> usize {
        let mut in_a = vec![false; m];
        for &j in &a[..k] {
            in_a[j] = true;
        }
        b[..k].iter().filter(|&&j| in_a[j]).count()
    };

    let mut nn_prec = Vec::with_capacity(k_grid.len());
    let mut fn_prec = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let mut nn_total = 0usize;
        let mut fn_total = 0usize;
        for o in &orders {
            nn_total += overlap(&o.x_near, &o.y_near, k);
            fn_total += overlap(&o.x_far, &o.y_far, k);
        }
        let denom = (m * k) as f64;
        nn_prec.push(nn_total as f64 / denom);
        fn_prec.push(fn_total as f64 / denom);
    }
    Ok(RetrievalCurves::from_columns(
        k_grid.iter().map(|&k| k as f64).collect(),
        nn_prec,
        fn_prec,
    ))
}

/// Single-reference-point binary neighborhood model: `r` true neighbors,
/// `k` retrieved neighbors, `n_tp` in both, with leakage mass `delta`
/// spread over the complement.
#[derive(Debug, Clone, Copy)]
pub struct BinaryNeighborhood {
    pub m: usize,
    pub r: usize,
    pub k: usize,
    pub n_tp: usize,
    pub delta: f64,
}

impl BinaryNeighborhood {
    pub fn new(m: usize, r: usize, k: usize, n_tp: usize, delta: f64) -> Result<Self> {
        if r == 0 || k == 0 || r > m - 1 || k > m - 1 {
            return Err(FtsneError::Parameter(format!(
                "need 1 <= r, k <= m-1; got r={r}, k={k}, m={m}"
            )));
        }
        if n_tp > r.min(k) {
            return Err(FtsneError::Parameter(format!(
                "n_tp={n_tp} exceeds min(r, k)={}",
                r.min(k)
            )));
        }
        if r + k - n_tp > m - 1 {
            return Err(FtsneError::Parameter(
                "r + k - n_tp exceeds the number of other points".into(),
            ));
        }
        if !(delta > 0.0 && delta < 0.5) {
            return Err(FtsneError::Parameter(format!(
                "delta must lie in (0, 0.5), got {delta}"
            )));
        }
        Ok(Self {
            m,
            r,
            k,
            n_tp,
            delta,
        })
    }

    pub fn n_fn(&self) -> usize {
        self.r - self.n_tp
    }

    pub fn n_fp(&self) -> usize {
        self.k - self.n_tp
    }

    pub fn n_tn(&self) -> usize {
        (self.m - 1) - self.r - self.k + self.n_tp
    }

    /// In-neighborhood true similarity `(1 - delta) / r`.
    pub fn a(&self) -> f64 {
        (1.0 - self.delta) / self.r as f64
    }

    /// Out-of-neighborhood true similarity `delta / (m - r - 1)`.
    pub fn b(&self) -> f64 {
        self.delta / (self.m - self.r - 1) as f64
    }

    /// In-neighborhood retrieved similarity `(1 - delta) / k`.
    pub fn c(&self) -> f64 {
        (1.0 - self.delta) / self.k as f64
    }

    /// Out-of-neighborhood retrieved similarity `delta / (m - k - 1)`.
    pub fn d(&self) -> f64 {
        self.delta / (self.m - self.k - 1) as f64
    }
}

/// Exact divergence of the binary model: the four-cell sum
/// `n_TP c f(a/c) + n_FN d f(a/d) + n_FP c f(b/c) + n_TN d f(b/d)`.
pub fn binary_divergence(bn: &BinaryNeighborhood, div: Divergence) -> Result<f64> {
    let (a, b, c, d) = (bn.a(), bn.b(), bn.c(), bn.d());
    Ok(bn.n_tp as f64 * c * div.f(a / c)?
        + bn.n_fn() as f64 * d * div.f(a / d)?
        + bn.n_fp() as f64 * c * div.f(b / c)?
        + bn.n_tn() as f64 * d * div.f(b / d)?)
}

/// Leading-order closed-form prediction of the binary divergence.
///
/// KL: `(n_FN/r) C0`, RKL: `(n_FP/k) C0` with `C0 = log((1-delta)/delta)`;
/// JS: their average plus `log(4)/2`; CH and HL: the three-term
/// expressions with the constants derived under the same truncation.
pub fn proposition1_prediction(bn: &BinaryNeighborhood, div: Divergence) -> Result<f64> {
    let delta = bn.delta;
    let c0 = ((1.0 - delta) / delta).ln();
    let (m, r, k) = (bn.m as f64, bn.r as f64, bn.k as f64);
    let recall_deficit = bn.n_fn() as f64 / r;
    let precision_deficit = bn.n_fp() as f64 / k;
    let tp_frac = bn.n_tp as f64 / k;
    let kl = recall_deficit * c0;
    let rkl = precision_deficit * c0;
    Ok(match div {
        Divergence::Kl => kl,
        Divergence::Rkl => rkl,
        Divergence::Js => 0.5 * (kl + rkl + 4.0_f64.ln()),
        Divergence::Ch => {
            let size_ratio = (r / k - 1.0) * (r / k - 1.0);
            let c1 = (1.0 - delta) / delta * (m - k - 1.0) / r - 2.0;
            (1.0 - delta) * (tp_frac * size_ratio + recall_deficit * c1 + precision_deficit)
        }
        Divergence::Hl => {
            let size_ratio = ((r / k).sqrt() - 1.0) * ((r / k).sqrt() - 1.0);
            let c1 = 1.0 - 2.0 * (k * delta / (1.0 - delta)).sqrt();
            let c2 = 1.0 - 2.0 * (r * delta / (1.0 - delta)).sqrt();
            (1.0 - delta)
                * (tp_frac * size_ratio + recall_deficit * c1 + precision_deficit * c2)
        }
        Divergence::Interpolated(alpha) => alpha * kl + (1.0 - alpha) * rkl,
    })
}
