//! Conjugate-dual lower bound and its alternating minimax optimizer.
//!
//! For any witness values `T_ij` in the domain of the conjugate `f*`,
//!
//! ```text
//! D_f(P || Q) >= sum_{i != j} [ T_ij p_ij - f*(T_ij) q_ij ],
//! ```
//!
//! with equality at `T_ij = f'(p_ij / q_ij)`. The witness is produced by a
//! small feed-forward network scoring unordered point pairs through
//! `score(x_i, x_j) = g([enc(x_i) + enc(x_j); enc(x_i) * enc(x_j)])`,
//! which is invariant to the pair order by construction. Raw scores are
//! clamped to [-500, 500] before the output activation; clamp events are
//! counted and reported.
//!
//! Optimization alternates `j_steps` of plain gradient ascent on the
//! network weights with `k_steps` of momentum descent on the embedding
//! coordinates, recording both the bound and the true primal loss each
//! round.

use crate::affinity::AffinityMatrix;
use crate::divergence::Divergence;
use crate::error::{FtsneError, Result};
use crate::matrix::{pairwise_sum, Mat};
use crate::primal::{
    clip_gradient_rows, init_embedding, low_dim_affinity, primal_loss, weighted_pair_gradient,
    Embedding, LowDimAffinity, OptimizerSchedule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Raw discriminator scores are clamped to this magnitude before the
/// output activation to keep `exp` finite.
pub const SCORE_CLAMP: f64 = 500.0;

/// One affine layer, also used as the matching gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Mat, // out x in
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros_like(other: &Layer) -> Layer {
        Layer {
            weights: Mat::zeros(other.weights.rows(), other.weights.cols()),
            bias: vec![0.0; other.bias.len()],
        }
    }

    fn add_scaled(&mut self, other: &Layer, s: f64) {
        for (a, b) in self
            .weights
            .data_mut()
            .iter_mut()
            .zip(other.weights.data())
        {
            *a += s * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += s * b;
        }
    }
}

/// Order-invariant pair scorer: a point encoder followed by a combiner
/// head ending in a linear scalar unit. Rectifier activations throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    input_dim: usize,
    encoded_dim: usize,
    encoder: Vec<Layer>,
    head: Vec<Layer>,
}

/// Gradient of the variational objective with respect to every weight,
/// shaped exactly like the discriminator.
#[derive(Debug, Clone)]
pub struct DiscriminatorGradient {
    pub encoder: Vec<Layer>,
    pub head: Vec<Layer>,
}

fn glorot_layer(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Layer {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let weights = Mat::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-limit..limit));
    Layer {
        weights,
        bias: vec![0.0; fan_out],
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn affine(layer: &Layer, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for r in 0..layer.weights.rows() {
        let mut z = layer.bias[r];
        for (w, x) in layer.weights.row(r).iter().zip(input) {
            z += w * x;
        }
        out.push(z);
    }
}

/// Per-point encoder forward cache: preactivations and activations of
/// every encoder layer.
#[derive(Debug, Clone)]
struct EncodeCache {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Discriminator {
    /// Builds a discriminator with the given hidden widths.
    ///
    /// `encoder_widths` may be empty (identity encoder); the head always
    /// appends a final linear scalar layer after its hidden widths.
    /// Weights are Glorot-uniform, biases zero, deterministic per seed.
    pub fn new(
        input_dim: usize,
        encoder_widths: &[usize],
        head_widths: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(FtsneError::Parameter("input dimension must be > 0".into()));
        }
        if encoder_widths.iter().chain(head_widths).any(|&w| w == 0) {
            return Err(FtsneError::Parameter("layer widths must be > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::new();
        let mut last = input_dim;
        for &w in encoder_widths {
            encoder.push(glorot_layer(&mut rng, w, last));
            last = w;
        }
        let encoded_dim = last;
        let mut head = Vec::new();
        let mut hlast = 2 * encoded_dim;
        for &w in head_widths {
            head.push(glorot_layer(&mut rng, w, hlast));
            hlast = w;
        }
        head.push(glorot_layer(&mut rng, 1, hlast));
        Ok(Self {
            input_dim,
            encoded_dim,
            encoder,
            head,
        })
    }

    /// Default architecture: one 10-unit encoder layer, one 20-unit head
    /// layer, final linear scalar.
    pub fn with_default_architecture(input_dim: usize, seed: u64) -> Result<Self> {
        Self::new(input_dim, &[10], &[20], seed)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn encoded_dim(&self) -> usize {
        self.encoded_dim
    }

    pub fn all_finite(&self) -> bool {
        self.encoder
            .iter()
            .chain(&self.head)
            .all(|l| l.weights.all_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn encode_with_cache(&self, x: &[f64]) -> EncodeCache {
        let mut pre = Vec::with_capacity(self.encoder.len());
        let mut post = Vec::with_capacity(self.encoder.len());
        let mut cur = x.to_vec();
        for layer in &self.encoder {
            let mut z = Vec::new();
            affine(layer, &cur, &mut z);
            cur = z.iter().copied().map(relu).collect();
            pre.push(z);
            post.push(cur.clone());
        }
        EncodeCache { pre, post }
    }

    fn encoding<'a>(&self, x: &'a [f64], cache: &'a EncodeCache) -> &'a [f64] {
        cache.post.last().map_or(x, Vec::as_slice)
    }

    /// Head forward pass; returns the raw score and per-layer caches.
    fn head_forward(&self, v: &[f64]) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.head.len());
        let mut post = Vec::with_capacity(self.head.len());
        let mut cur = v.to_vec();
        let last = self.head.len() - 1;
        for (l, layer) in self.head.iter().enumerate() {
            let mut z = Vec::new();
            affine(layer, &cur, &mut z);
            if l < last {
                cur = z.iter().copied().map(relu).collect();
            } else {
                cur = z.clone();
            }
            pre.push(z);
            post.push(cur.clone());
        }
        (post[last][0], pre, post)
    }

    fn pair_input(&self, ei: &[f64], ej: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.encoded_dim);
        for (a, b) in ei.iter().zip(ej) {
            v.push(a + b);
        }
        for (a, b) in ei.iter().zip(ej) {
            v.push(a * b);
        }
        v
    }

    /// Raw score of one pair (used by tests; bulk scoring goes through
    /// [`score_pairs`]).
    pub fn score_pair(&self, xi: &[f64], xj: &[f64]) -> f64 {
        let ci = self.encode_with_cache(xi);
        let cj = self.encode_with_cache(xj);
        let v = self.pair_input(self.encoding(xi, &ci), self.encoding(xj, &cj));
        self.head_forward(&v).0
    }

    /// Applies one gradient-ascent step `w += lr * g`.
    pub fn apply_ascent(&mut self, grad: &DiscriminatorGradient, lr: f64) {
        for (l, g) in self.encoder.iter_mut().zip(&grad.encoder) {
            l.add_scaled(g, lr);
        }
        for (l, g) in self.head.iter_mut().zip(&grad.head) {
            l.add_scaled(g, lr);
        }
    }
}

/// Raw score matrix for all pairs; exactly symmetric, zero diagonal.
pub fn score_pairs(disc: &Discriminator, points: &Mat) -> Mat {
    let m = points.rows();
    let caches: Vec<EncodeCache> = (0..m)
        .into_par_iter()
        .map(|i| disc.encode_with_cache(points.row(i)))
        .collect();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let ei = disc.encoding(points.row(i), &caches[i]);
            let mut row = vec![0.0; m];
            for (j, slot) in row.iter_mut().enumerate().skip(i + 1) {
                let ej = disc.encoding(points.row(j), &caches[j]);
                let v = disc.pair_input(ei, ej);
                *slot = disc.head_forward(&v).0;
            }
            row
        })
        .collect();
    let mut out = Mat::zeros(m, m);
    for (i, row) in rows.iter().enumerate() {
        for j in (i + 1)..m {
            out.set(i, j, row[j]);
            out.set(j, i, row[j]);
        }
    }
    out
}

/// Witness matrix `T = h(clamp(score))` plus the number of clamped
/// entries (counted over unordered pairs).
pub fn witness_matrix(div: Divergence, disc: &Discriminator, points: &Mat) -> Result<(Mat, u64)> {
    let raw = score_pairs(disc, points);
    let m = raw.rows();
    let mut t = Mat::zeros(m, m);
    let mut clamped = 0;
    for i in 0..m {
        for j in (i + 1)..m {
            let r = raw.get(i, j);
            if r.abs() > SCORE_CLAMP {
                clamped += 1;
            }
            let v = div.activation(r.clamp(-SCORE_CLAMP, SCORE_CLAMP))?;
            t.set(i, j, v);
            t.set(j, i, v);
        }
    }
    Ok((t, clamped))
}

/// Bound value for explicit witness values:
/// `sum_{i != j} [ T_ij p_ij - f*(T_ij) q_ij ]`.
pub fn variational_objective_with_witness(
    div: Divergence,
    p: &Mat,
    q: &Mat,
    witness: &Mat,
) -> Result<f64> {
    let m = p.rows();
    let rows = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..m {
                if i == j {
                    continue;
                }
                let t = witness.get(i, j);
                acc += t * p.get(i, j) - div.conjugate(t)? * q.get(i, j);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?;
    let total = pairwise_sum(&rows);
    if total.is_nan() {
        return Err(FtsneError::Numeric(
            "NaN while evaluating variational objective".into(),
        ));
    }
    Ok(total)
}

/// Variational objective of a discriminator against the current
/// embedding.
pub fn variational_objective(
    div: Divergence,
    p: &AffinityMatrix,
    emb: &Embedding,
    disc: &Discriminator,
    points: &Mat,
) -> Result<f64> {
    let low = low_dim_affinity(emb.coords());
    let (witness, _) = witness_matrix(div, disc, points)?;
    variational_objective_with_witness(div, p.probs(), low.probs(), &witness)
}

/// Reusable buffers for per-pair head passes; allocation-free after
/// construction.
struct HeadScratch {
    v: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    dz: Vec<f64>,
    da: Vec<f64>,
    dv: Vec<f64>,
}

impl HeadScratch {
    fn new(disc: &Discriminator) -> Self {
        let widths: Vec<usize> = disc.head.iter().map(|l| l.weights.rows()).collect();
        let max_width = widths.iter().copied().max().unwrap_or(1);
        Self {
            v: vec![0.0; 2 * disc.encoded_dim],
            pre: widths.iter().map(|&w| vec![0.0; w]).collect(),
            post: widths.iter().map(|&w| vec![0.0; w]).collect(),
            dz: vec![0.0; max_width],
            da: vec![0.0; max_width.max(2 * disc.encoded_dim)],
            dv: vec![0.0; 2 * disc.encoded_dim],
        }
    }

    fn load_pair(&mut self, e: usize, ei: &[f64], ej: &[f64]) {
        for k in 0..e {
            self.v[k] = ei[k] + ej[k];
            self.v[e + k] = ei[k] * ej[k];
        }
    }
}

impl Discriminator {
    /// Head forward pass writing into scratch buffers; returns the raw
    /// score.
    fn head_forward_scratch(&self, s: &mut HeadScratch) -> f64 {
        let last = self.head.len() - 1;
        for (l, layer) in self.head.iter().enumerate() {
            let (done, todo) = s.post.split_at_mut(l);
            let input: &[f64] = if l == 0 { &s.v } else { &done[l - 1] };
            let pre = &mut s.pre[l];
            let post = &mut todo[0];
            for r in 0..layer.weights.rows() {
                let mut z = layer.bias[r];
                for (w, x) in layer.weights.row(r).iter().zip(input) {
                    z += w * x;
                }
                pre[r] = z;
                post[r] = if l < last { z.max(0.0) } else { z };
            }
        }
        s.post[last][0]
    }

    /// Head backward pass from an output seed of `coeff`, accumulating
    /// weight gradients into `grads` and leaving the input gradient in
    /// `s.dv`.
    fn head_backward_scratch(&self, s: &mut HeadScratch, coeff: f64, grads: &mut [Layer]) {
        let last = self.head.len() - 1;
        s.dz[0] = coeff;
        let mut dz_len = 1;
        for l in (0..=last).rev() {
            let layer = &self.head[l];
            let input: &[f64] = if l == 0 { &s.v } else { &s.post[l - 1] };
            for r in 0..dz_len {
                let dzr = s.dz[r];
                grads[l].bias[r] += dzr;
                let wrow = grads[l].weights.row_mut(r);
                for (slot, &x) in wrow.iter_mut().zip(input) {
                    *slot += dzr * x;
                }
            }
            // propagate to the layer input
            let cols = layer.weights.cols();
            s.da[..cols].fill(0.0);
            for r in 0..dz_len {
                let dzr = s.dz[r];
                for (slot, &w) in s.da[..cols].iter_mut().zip(layer.weights.row(r)) {
                    *slot += dzr * w;
                }
            }
            if l == 0 {
                s.dv[..cols].copy_from_slice(&s.da[..cols]);
            } else {
                for r in 0..cols {
                    s.dz[r] = if s.pre[l - 1][r] > 0.0 { s.da[r] } else { 0.0 };
                }
                dz_len = cols;
            }
        }
    }
}

/// Rows are processed in fixed-size blocks so the reduction order (and
/// thus the result) is independent of the worker count.
const PAIR_BLOCK_ROWS: usize = 32;

struct BlockAccum {
    head: Vec<Layer>,
    d_enc: Mat,
}

fn discriminator_gradient_with_low(
    div: Divergence,
    p: &Mat,
    low: &LowDimAffinity,
    disc: &Discriminator,
    points: &Mat,
) -> Result<DiscriminatorGradient> {
    let m = points.rows();
    let e = disc.encoded_dim;
    let caches: Vec<EncodeCache> = (0..m)
        .into_par_iter()
        .map(|i| disc.encode_with_cache(points.row(i)))
        .collect();

    // Sweep unordered pairs once; the objective sums over ordered pairs
    // and both orders contribute identically, hence the factor 2.
    let n_blocks = m.div_ceil(PAIR_BLOCK_ROWS);
    let blocks = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * PAIR_BLOCK_ROWS;
            let hi = ((b + 1) * PAIR_BLOCK_ROWS).min(m);
            let mut acc = BlockAccum {
                head: disc.head.iter().map(Layer::zeros_like).collect(),
                d_enc: Mat::zeros(m, e),
            };
            let mut s = HeadScratch::new(disc);
            for i in lo..hi {
                let ei = disc.encoding(points.row(i), &caches[i]);
                for j in (i + 1)..m {
                    let ej = disc.encoding(points.row(j), &caches[j]);
                    s.load_pair(e, ei, ej);
                    let raw = disc.head_forward_scratch(&mut s);
                    if raw.abs() > SCORE_CLAMP {
                        continue; // clamp kills the gradient
                    }
                    let t = div.activation(raw)?;
                    let coeff2 = 2.0
                        * (p.get(i, j) - div.conjugate_prime(t)? * low.probs().get(i, j))
                        * div.activation_prime(raw)?;
                    if coeff2 == 0.0 {
                        continue;
                    }
                    disc.head_backward_scratch(&mut s, coeff2, &mut acc.head);
                    for k in 0..e {
                        let (dv_sum, dv_prod) = (s.dv[k], s.dv[e + k]);
                        *acc.d_enc.row_mut(i).get_mut(k).unwrap() += dv_sum + dv_prod * ej[k];
                        *acc.d_enc.row_mut(j).get_mut(k).unwrap() += dv_sum + dv_prod * ei[k];
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<BlockAccum>>>()?;

    let mut head: Vec<Layer> = disc.head.iter().map(Layer::zeros_like).collect();
    let mut d_enc = Mat::zeros(m, e);
    for block in &blocks {
        for (acc, part) in head.iter_mut().zip(&block.head) {
            acc.add_scaled(part, 1.0);
        }
        for (slot, v) in d_enc.data_mut().iter_mut().zip(block.d_enc.data()) {
            *slot += v;
        }
    }

    // backprop each point's encoding gradient through the encoder
    let encoder_parts: Vec<Vec<Layer>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut grads: Vec<Layer> = disc.encoder.iter().map(Layer::zeros_like).collect();
            let cache = &caches[i];
            let mut da: Vec<f64> = d_enc.row(i).to_vec();
            for l in (0..disc.encoder.len()).rev() {
                let dz: Vec<f64> = da
                    .iter()
                    .zip(&cache.pre[l])
                    .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                    .collect();
                let input: &[f64] = if l == 0 {
                    points.row(i)
                } else {
                    &cache.post[l - 1]
                };
                for (r, &dzr) in dz.iter().enumerate() {
                    grads[l].bias[r] += dzr;
                    let wrow = grads[l].weights.row_mut(r);
                    for (slot, &x) in wrow.iter_mut().zip(input) {
                        *slot += dzr * x;
                    }
                }
                if l > 0 {
                    let mut prev = vec![0.0; disc.encoder[l].weights.cols()];
                    for (r, &dzr) in dz.iter().enumerate() {
                        for (slot, &w) in prev.iter_mut().zip(disc.encoder[l].weights.row(r)) {
                            *slot += dzr * w;
                        }
                    }
                    da = prev;
                }
            }
            grads
        })
        .collect();
    let mut encoder: Vec<Layer> = disc.encoder.iter().map(Layer::zeros_like).collect();
    for part in &encoder_parts {
        for (acc, p) in encoder.iter_mut().zip(part) {
            acc.add_scaled(p, 1.0);
        }
    }

    Ok(DiscriminatorGradient { encoder, head })
}

/// Exact reverse-mode gradient of the variational objective with respect
/// to every discriminator weight.
pub fn discriminator_gradient(
    div: Divergence,
    p: &AffinityMatrix,
    emb: &Embedding,
    disc: &Discriminator,
    points: &Mat,
) -> Result<DiscriminatorGradient> {
    let low = low_dim_affinity(emb.coords());
    discriminator_gradient_with_low(div, p.probs(), &low, disc, points)
}

fn embedding_gradient_with_witness(
    div: Divergence,
    low: &LowDimAffinity,
    coords: &Mat,
    witness: &Mat,
) -> Result<Mat> {
    let m = coords.rows();
    // c_ij = f*(T_ij); only the -f*(T) q term depends on the embedding
    let mut c = Mat::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let v = div.conjugate(witness.get(i, j))?;
            c.set(i, j, v);
            c.set(j, i, v);
        }
    }
    let mean_rows: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in 0..m {
                s += c.get(i, j) * low.probs().get(i, j);
            }
            s
        })
        .collect();
    let mean = pairwise_sum(&mean_rows);
    weighted_pair_gradient(coords, low, mean, 1.0, |i, j| Ok(c.get(i, j)))
}

/// Gradient of the variational objective with respect to the embedding
/// coordinates: `+4 sum_j (c_ij - <c>) (W_ij^2 / Z) (y_i - y_j)` with
/// `c = f*(T)`.
pub fn embedding_gradient_variational(
    div: Divergence,
    emb: &Embedding,
    disc: &Discriminator,
    points: &Mat,
) -> Result<Mat> {
    let low = low_dim_affinity(emb.coords());
    let (witness, _) = witness_matrix(div, disc, points)?;
    embedding_gradient_with_witness(div, &low, emb.coords(), &witness)
}

/// Alternating-minimax configuration.
#[derive(Debug, Clone)]
pub struct MinimaxConfig {
    /// Discriminator ascent steps per round (J).
    pub j_steps: usize,
    /// Embedding descent steps per round (K).
    pub k_steps: usize,
    /// Constant discriminator learning rate.
    pub disc_lr: f64,
    /// Embedding schedule; its decay index persists across rounds.
    pub emb_schedule: OptimizerSchedule,
    /// Outer rounds.
    pub rounds: usize,
    pub encoder_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    /// Stop early once the relative primal-loss change over 20 rounds
    /// falls below 1e-6.
    pub plateau_detection: bool,
}

impl Default for MinimaxConfig {
    fn default() -> Self {
        Self {
            j_steps: 10,
            k_steps: 10,
            disc_lr: 1e-3,
            emb_schedule: OptimizerSchedule::default(),
            rounds: 100,
            encoder_widths: vec![10],
            head_widths: vec![20],
            plateau_detection: false,
        }
    }
}

impl MinimaxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.j_steps == 0 || self.k_steps == 0 {
            return Err(FtsneError::Parameter(
                "j_steps and k_steps must be >= 1".into(),
            ));
        }
        if !(self.disc_lr > 0.0 && self.disc_lr.is_finite()) {
            return Err(FtsneError::Parameter(format!(
                "disc_lr must be positive, got {}",
                self.disc_lr
            )));
        }
        self.emb_schedule.validate()
    }
}

/// One outer round of the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub variational_objective: f64,
    pub primal_loss: f64,
    /// Cumulative clamp + clip events up to this round.
    pub clip_events: u64,
}

/// Result of a minimax run.
#[derive(Debug, Clone)]
pub struct VariationalRun {
    pub embedding: Embedding,
    pub discriminator: Discriminator,
    pub trace: Vec<RoundRecord>,
}

/// Alternating minimax optimization of the variational bound.
///
/// Requires one of the five named divergences; the interpolated family
/// has no conjugate and is rejected.
pub fn run_variational(
    div: Divergence,
    p: &AffinityMatrix,
    data: &crate::affinity::Dataset,
    config: &MinimaxConfig,
    d: usize,
) -> Result<VariationalRun> {
    if !div.has_dual_form() {
        return Err(FtsneError::Unsupported(format!(
            "divergence {div} has no conjugate-dual form; use the primal optimizer"
        )));
    }
    config.validate()?;
    let m = data.len();
    if p.len() != m {
        return Err(FtsneError::Parameter(format!(
            "affinity size {} does not match dataset size {m}",
            p.len()
        )));
    }
    let points = data.points();
    let seed = config.emb_schedule.seed;
    let mut emb = init_embedding(m, d, seed)?;
    let mut disc = Discriminator::new(
        points.cols(),
        &config.encoder_widths,
        &config.head_widths,
        seed.wrapping_add(0x9e37_79b9),
    )?;

    let mut trace = Vec::with_capacity(config.rounds);
    let mut clip_events: u64 = 0;
    let mut emb_step = 0usize;
    for round in 0..config.rounds {
        // ascent phase: q is fixed while phi moves
        let low = low_dim_affinity(emb.coords());
        for _ in 0..config.j_steps {
            let grad = discriminator_gradient_with_low(div, p.probs(), &low, &disc, points)?;
            disc.apply_ascent(&grad, config.disc_lr);
            if !disc.all_finite() {
                return Err(FtsneError::NumericAbort {
                    step: round,
                    reason: "discriminator weights became non-finite".into(),
                    last_good: Some(Box::new(emb.coords().clone())),
                });
            }
        }

        // descent phase: the witness is fixed while y moves
        let (witness, clamped) = witness_matrix(div, &disc, points)?;
        clip_events += clamped;
        for _ in 0..config.k_steps {
            let low = low_dim_affinity(emb.coords());
            let mut grad = embedding_gradient_with_witness(div, &low, emb.coords(), &witness)?;
            clip_events += clip_gradient_rows(&mut grad);
            let lr = config.emb_schedule.lr_at(emb_step);
            let momentum = config.emb_schedule.momentum_at(emb_step);
            emb_step += 1;
            let before = emb.coords().clone();
            for idx in 0..grad.data().len() {
                let v = momentum * emb.velocity().data()[idx] - lr * grad.data()[idx];
                emb.velocity_mut().data_mut()[idx] = v;
                emb.coords_mut().data_mut()[idx] += v;
            }
            if !emb.coords().all_finite() {
                return Err(FtsneError::NumericAbort {
                    step: round,
                    reason: "embedding coordinates became non-finite".into(),
                    last_good: Some(Box::new(before)),
                });
            }
            emb.bump_epoch();
        }

        let low = low_dim_affinity(emb.coords());
        let objective =
            variational_objective_with_witness(div, p.probs(), low.probs(), &witness)?;
        let loss = primal_loss(div, p, &emb)?;
        if !objective.is_finite() || loss.is_nan() {
            return Err(FtsneError::NumericAbort {
                step: round,
                reason: format!("objective {objective}, primal loss {loss}"),
                last_good: Some(Box::new(emb.coords().clone())),
            });
        }
        trace.push(RoundRecord {
            round,
            variational_objective: objective,
            primal_loss: loss,
            clip_events,
        });

        if config.plateau_detection && trace.len() > 20 {
            let prev = trace[trace.len() - 21].primal_loss;
            if (loss - prev).abs() < 1e-6 * prev.abs().max(1e-12) {
                break;
            }
        }
    }

    Ok(VariationalRun {
        embedding: emb,
        discriminator: disc,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::Dataset;
    use crate::divergence::NAMED_DIVERGENCES;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    fn random_points(m: usize, dim: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(m, dim, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn random_embedding(m: usize, d: usize, seed: u64) -> Embedding {
        Embedding::from_coords(random_points(m, d, seed))
    }

    #[test]
    fn scores_are_bit_exact_symmetric() {
        let points = random_points(12, 3, 1);
        let disc = Discriminator::with_default_architecture(3, 2).unwrap();
        let s = score_pairs(&disc, &points);
        for i in 0..12 {
            assert_eq!(s.get(i, i), 0.0);
            for j in 0..12 {
                assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
        // independent order check on the single-pair path
        let a = disc.score_pair(points.row(3), points.row(7));
        let b = disc.score_pair(points.row(7), points.row(3));
        assert_eq!(a, b);
        assert_eq!(a, s.get(3, 7));
    }

    #[test]
    fn zero_final_layer_collapses_to_bias() {
        let points = random_points(6, 2, 3);
        let mut disc = Discriminator::with_default_architecture(2, 4).unwrap();
        let last = disc.head.last_mut().unwrap();
        last.weights.data_mut().iter_mut().for_each(|w| *w = 0.0);
        last.bias[0] = 0.37;
        let s = score_pairs(&disc, &points);
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert_eq!(s.get(i, j), 0.37);
                }
            }
        }
    }

    #[test]
    fn kl_constant_witness_gives_zero_bound() {
        let p = random_affinity(8, 5);
        let emb = random_embedding(8, 2, 6);
        let low = low_dim_affinity(emb.coords());
        let ones = Mat::from_fn(8, 8, |i, j| if i == j { 0.0 } else { 1.0 });
        let obj =
            variational_objective_with_witness(Divergence::Kl, p.probs(), low.probs(), &ones)
                .unwrap();
        assert!(obj.abs() < 1e-12);
    }

    #[test]
    fn analytic_witness_makes_bound_tight() {
        for (k, div) in NAMED_DIVERGENCES.into_iter().enumerate() {
            for inst in 0..5 {
                let seed = (k * 10 + inst) as u64;
                let p = random_affinity(9, seed);
                let emb = random_embedding(9, 2, seed + 1000);
                let low = low_dim_affinity(emb.coords());
                let witness = Mat::from_fn(9, 9, |i, j| {
                    if i == j {
                        0.0
                    } else {
                        div.f_prime(p.probs().get(i, j) / low.probs().get(i, j))
                            .unwrap()
                    }
                });
                let obj = variational_objective_with_witness(
                    div,
                    p.probs(),
                    low.probs(),
                    &witness,
                )
                .unwrap();
                let primal =
                    crate::divergence::primal_divergence(div, p.probs(), low.probs()).unwrap();
                assert!(
                    (obj - primal).abs() < 1e-9,
                    "{div}: bound {obj} vs primal {primal}"
                );
            }
        }
    }

    #[test]
    fn random_discriminators_stay_below_primal() {
        let mut failures = 0;
        for trial in 0..200 {
            let p = random_affinity(8, trial);
            let emb = random_embedding(8, 2, trial + 500);
            let data = random_points(8, 3, trial + 900);
            let disc = Discriminator::with_default_architecture(3, trial + 1300).unwrap();
            for div in NAMED_DIVERGENCES {
                let obj = variational_objective(div, &p, &emb, &disc, &data).unwrap();
                let primal = primal_loss(div, &p, &emb).unwrap();
                if obj > primal + 1e-9 {
                    failures += 1;
                }
            }
        }
        assert_eq!(failures, 0);
    }

    /// Finite-difference oracle over every discriminator weight.
    fn fd_disc_gradient(
        div: Divergence,
        p: &AffinityMatrix,
        emb: &Embedding,
        disc: &Discriminator,
        points: &Mat,
        h: f64,
    ) -> DiscriminatorGradient {
        let objective = |d: &Discriminator| -> f64 {
            variational_objective(div, p, emb, d, points).unwrap()
        };
        let mut grad = DiscriminatorGradient {
            encoder: disc.encoder.iter().map(Layer::zeros_like).collect(),
            head: disc.head.iter().map(Layer::zeros_like).collect(),
        };
        for (li, layer) in disc.encoder.iter().enumerate() {
            for idx in 0..layer.weights.data().len() {
                let mut plus = disc.clone();
                plus.encoder[li].weights.data_mut()[idx] += h;
                let mut minus = disc.clone();
                minus.encoder[li].weights.data_mut()[idx] -= h;
                grad.encoder[li].weights.data_mut()[idx] =
                    (objective(&plus) - objective(&minus)) / (2.0 * h);
            }
            for b in 0..layer.bias.len() {
                let mut plus = disc.clone();
                plus.encoder[li].bias[b] += h;
                let mut minus = disc.clone();
                minus.encoder[li].bias[b] -= h;
                grad.encoder[li].bias[b] = (objective(&plus) - objective(&minus)) / (2.0 * h);
            }
        }
        for (li, layer) in disc.head.iter().enumerate() {
            for idx in 0..layer.weights.data().len() {
                let mut plus = disc.clone();
                plus.head[li].weights.data_mut()[idx] += h;
                let mut minus = disc.clone();
                minus.head[li].weights.data_mut()[idx] -= h;
                grad.head[li].weights.data_mut()[idx] =
                    (objective(&plus) - objective(&minus)) / (2.0 * h);
            }
            for b in 0..layer.bias.len() {
                let mut plus = disc.clone();
                plus.head[li].bias[b] += h;
                let mut minus = disc.clone();
                minus.head[li].bias[b] -= h;
                grad.head[li].bias[b] = (objective(&plus) - objective(&minus)) / (2.0 * h);
            }
        }
        grad
    }

    fn assert_layers_close(a: &[Layer], b: &[Layer], tol: f64, what: &str) {
        for (la, lb) in a.iter().zip(b) {
            for (x, y) in la.weights.data().iter().zip(lb.weights.data()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
                assert!(rel < tol, "{what} weight: {x} vs {y}");
            }
            for (x, y) in la.bias.iter().zip(&lb.bias) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
                assert!(rel < tol, "{what} bias: {x} vs {y}");
            }
        }
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        for div in NAMED_DIVERGENCES {
            let p = random_affinity(6, 31);
            let emb = random_embedding(6, 2, 32);
            let data = random_points(6, 2, 33);
            let disc = Discriminator::new(2, &[3], &[4], 34).unwrap();
            let analytic = discriminator_gradient(div, &p, &emb, &disc, &data).unwrap();
            let fd = fd_disc_gradient(div, &p, &emb, &disc, &data, 1e-6);
            assert_layers_close(&analytic.encoder, &fd.encoder, 1e-4, &format!("{div} encoder"));
            assert_layers_close(&analytic.head, &fd.head, 1e-4, &format!("{div} head"));
        }
    }

    #[test]
    fn ascent_step_increases_objective() {
        for div in NAMED_DIVERGENCES {
            let p = random_affinity(7, 41);
            let emb = random_embedding(7, 2, 42);
            let data = random_points(7, 2, 43);
            let mut disc = Discriminator::new(2, &[4], &[5], 44).unwrap();
            let before = variational_objective(div, &p, &emb, &disc, &data).unwrap();
            let grad = discriminator_gradient(div, &p, &emb, &disc, &data).unwrap();
            disc.apply_ascent(&grad, 1e-6);
            let after = variational_objective(div, &p, &emb, &disc, &data).unwrap();
            assert!(after > before, "{div}: {before} -> {after}");
        }
    }

    #[test]
    fn zero_data_symmetric_init_gives_uniform_encoder_gradient() {
        let m = 5;
        let p = random_affinity(m, 51);
        let emb = random_embedding(m, 2, 52);
        let data = Mat::zeros(m, 3);
        let mut disc = Discriminator::new(3, &[4], &[4], 53).unwrap();
        // make every unit within each layer identical
        for layer in disc.encoder.iter_mut().chain(disc.head.iter_mut()) {
            let cols = layer.weights.cols();
            for r in 0..layer.weights.rows() {
                for c in 0..cols {
                    layer.weights.set(r, c, 0.1);
                }
                layer.bias[r] = 0.05;
            }
        }
        let grad = discriminator_gradient(Divergence::Kl, &p, &emb, &disc, &data).unwrap();
        // with zero inputs the encoder weight gradient vanishes and the
        // bias gradient is identical across units
        let enc = &grad.encoder[0];
        assert!(enc.weights.data().iter().all(|&w| w == 0.0));
        let b0 = enc.bias[0];
        assert!(enc.bias.iter().all(|&b| b == b0));
    }

    /// Finite differences of the bound with respect to the coordinates.
    fn fd_embedding_gradient(
        div: Divergence,
        p: &AffinityMatrix,
        emb: &Embedding,
        disc: &Discriminator,
        points: &Mat,
        h: f64,
    ) -> Mat {
        let mut out = Mat::zeros(emb.len(), emb.dim());
        for i in 0..emb.len() {
            for k in 0..emb.dim() {
                let mut plus = emb.clone();
                plus.coords_mut().set(i, k, emb.coords().get(i, k) + h);
                let mut minus = emb.clone();
                minus.coords_mut().set(i, k, emb.coords().get(i, k) - h);
                let fp = variational_objective(div, p, &plus, disc, points).unwrap();
                let fm = variational_objective(div, p, &minus, disc, points).unwrap();
                out.set(i, k, (fp - fm) / (2.0 * h));
            }
        }
        out
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        for div in NAMED_DIVERGENCES {
            let p = random_affinity(7, 61);
            let emb = random_embedding(7, 2, 62);
            let data = random_points(7, 3, 63);
            let disc = Discriminator::new(3, &[4], &[4], 64).unwrap();
            let analytic = embedding_gradient_variational(div, &emb, &disc, &data).unwrap();
            let fd = fd_embedding_gradient(div, &p, &emb, &disc, &data, 1e-6);
            for idx in 0..analytic.data().len() {
                let (a, f) = (analytic.data()[idx], fd.data()[idx]);
                let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
                assert!(rel < 1e-4, "{div} coord {idx}: {a} vs {f}");
            }
            // translation invariance: per-axis totals vanish
            for k in 0..2 {
                let s: f64 = (0..7).map(|i| analytic.get(i, k)).sum();
                assert!(s.abs() < 1e-9, "{div} axis {k}");
            }
        }
    }

    #[test]
    fn constant_witness_gives_zero_embedding_gradient() {
        let emb = random_embedding(6, 2, 71);
        let low = low_dim_affinity(emb.coords());
        let witness = Mat::from_fn(6, 6, |i, j| if i == j { 0.0 } else { 0.3 });
        let grad =
            embedding_gradient_with_witness(Divergence::Hl, &low, emb.coords(), &witness).unwrap();
        let max = grad.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(max < 1e-14);
    }

    fn small_dataset(m: usize, seed: u64) -> (Dataset, AffinityMatrix) {
        let points = random_points(m, 3, seed);
        let data = Dataset::new(points, None).unwrap();
        let cond = crate::affinity::conditional_affinities(&data, 4.0).unwrap();
        let p = crate::affinity::symmetrize(&cond);
        (data, p)
    }

    #[test]
    fn zero_rounds_returns_initial_embedding() {
        let (data, p) = small_dataset(10, 81);
        let config = MinimaxConfig {
            rounds: 0,
            ..Default::default()
        };
        let run = run_variational(Divergence::Kl, &p, &data, &config, 2).unwrap();
        let init = init_embedding(10, 2, config.emb_schedule.seed).unwrap();
        assert_eq!(run.embedding.coords(), init.coords());
        assert!(run.trace.is_empty());
    }

    #[test]
    fn interpolated_divergence_is_rejected() {
        let (data, p) = small_dataset(10, 82);
        let config = MinimaxConfig::default();
        match run_variational(Divergence::Interpolated(0.3), &p, &data, &config, 2) {
            Err(FtsneError::Unsupported(_)) => {}
            other => panic!("expected unsupported-configuration error, got {other:?}"),
        }
    }

    #[test]
    fn run_is_deterministic_and_respects_lower_bound() {
        let (data, p) = small_dataset(15, 83);
        let config = MinimaxConfig {
            rounds: 8,
            j_steps: 3,
            k_steps: 3,
            disc_lr: 5e-3,
            emb_schedule: OptimizerSchedule {
                lr0: 20.0,
                seed: 7,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = run_variational(Divergence::Js, &p, &data, &config, 2).unwrap();
        let b = run_variational(Divergence::Js, &p, &data, &config, 2).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.embedding.coords(), b.embedding.coords());
        for rec in &a.trace {
            assert!(
                rec.variational_objective <= rec.primal_loss + 1e-7,
                "round {}: bound {} above primal {}",
                rec.round,
                rec.variational_objective,
                rec.primal_loss
            );
        }
        // symmetry survives arbitrary update sequences
        let s = score_pairs(&a.discriminator, data.points());
        for i in 0..15 {
            for j in 0..15 {
                assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
    }
}
