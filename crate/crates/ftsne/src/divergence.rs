//! The f-divergence family used by the embedding objectives.
//!
//! A [`Divergence`] bundles four functions of one variable:
//!
//! * the convex generator `f` with `f(1) = 0`,
//! * its analytic derivative `f'` (used by gradients and the tight dual
//!   witness `T* = f'(p/q)`),
//! * the Fenchel conjugate `f*` (used by the variational lower bound),
//! * the output activation `h` mapping an unconstrained score into the
//!   domain of `f*`.
//!
//! Five named instances are provided (KL, reverse KL, Jensen-Shannon,
//! chi-square, squared Hellinger) plus a KL/RKL interpolation
//! `alpha * f_KL + (1 - alpha) * f_RKL`. The interpolation exists only at
//! the generator level, so it supports primal optimization but has no
//! conjugate-dual form.

use crate::error::{FtsneError, Result};
use crate::matrix::{pairwise_sum, Mat};
use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;

const LN_2: f64 = std::f64::consts::LN_2;

/// An f-divergence selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Divergence {
    /// Kullback-Leibler, `f(t) = t log t`.
    Kl,
    /// Reverse Kullback-Leibler, `f(t) = -log t`.
    Rkl,
    /// Jensen-Shannon, `f(t) = (t+1) log(2/(t+1)) + t log t`.
    Js,
    /// Chi-square, `f(t) = (t-1)^2`.
    Ch,
    /// Squared Hellinger, `f(t) = (sqrt(t)-1)^2`.
    Hl,
    /// `alpha * f_KL + (1-alpha) * f_RKL` with `alpha` in [0, 1].
    Interpolated(f64),
}

impl Divergence {
    /// Builds an interpolated divergence after validating `alpha`.
    pub fn interpolated(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(FtsneError::Parameter(format!(
                "interpolation alpha must be in [0, 1], got {alpha}"
            )));
        }
        Ok(Divergence::Interpolated(alpha))
    }

    /// True for the five named divergences with a conjugate-dual form.
    pub fn has_dual_form(&self) -> bool {
        !matches!(self, Divergence::Interpolated(_))
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if t > 0.0 {
            Ok(())
        } else {
            Err(FtsneError::Domain {
                divergence: self.to_string(),
                what: "generator argument t",
                value: t,
            })
        }
    }

    /// Generator value `f(t)` for `t > 0`.
    pub fn f(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        Ok(match *self {
            Divergence::Kl => t * t.ln(),
            Divergence::Rkl => -t.ln(),
            Divergence::Js => (t + 1.0) * (2.0 / (t + 1.0)).ln() + t * t.ln(),
            Divergence::Ch => (t - 1.0) * (t - 1.0),
            Divergence::Hl => {
                let s = t.sqrt() - 1.0;
                s * s
            }
            Divergence::Interpolated(alpha) => alpha * (t * t.ln()) + (1.0 - alpha) * (-t.ln()),
        })
    }

    /// Analytic derivative `f'(t)` for `t > 0`.
    pub fn f_prime(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        Ok(match *self {
            Divergence::Kl => 1.0 + t.ln(),
            Divergence::Rkl => -1.0 / t,
            Divergence::Js => (2.0 * t / (1.0 + t)).ln(),
            Divergence::Ch => 2.0 * (t - 1.0),
            Divergence::Hl => 1.0 - 1.0 / t.sqrt(),
            Divergence::Interpolated(alpha) => {
                alpha * (1.0 + t.ln()) + (1.0 - alpha) * (-1.0 / t)
            }
        })
    }

    /// Fenchel conjugate `f*(u)`.
    ///
    /// Domains: KL and CH accept all reals, RKL needs `u < 0`, JS needs
    /// `u < log 2`, HL needs `u < 1`. The interpolated divergence has no
    /// conjugate.
    pub fn conjugate(&self, u: f64) -> Result<f64> {
        let domain_err = |value| FtsneError::Domain {
            divergence: self.to_string(),
            what: "conjugate argument u",
            value,
        };
        match *self {
            Divergence::Kl => Ok((u - 1.0).exp()),
            Divergence::Rkl => {
                if u < 0.0 {
                    Ok(-1.0 - (-u).ln())
                } else {
                    Err(domain_err(u))
                }
            }
            // Table form -log(1 - exp(u)) is inconsistent with the range of
            // h (h < log 2): the conjugate of the JS generator above is
            // -log(2 - exp(u)), valid for u < log 2.
            Divergence::Js => {
                if u < LN_2 {
                    Ok(-(2.0 - u.exp()).ln())
                } else {
                    Err(domain_err(u))
                }
            }
            Divergence::Hl => {
                if u < 1.0 {
                    Ok(u / (1.0 - u))
                } else {
                    Err(domain_err(u))
                }
            }
            Divergence::Ch => Ok(u * u / 4.0 + u),
            Divergence::Interpolated(_) => Err(FtsneError::Unsupported(
                "interpolated divergence has no conjugate-dual form".into(),
            )),
        }
    }

    /// Derivative of the Fenchel conjugate, `(f*)'(u)`.
    pub fn conjugate_prime(&self, u: f64) -> Result<f64> {
        match *self {
            Divergence::Kl => Ok((u - 1.0).exp()),
            Divergence::Rkl => Ok(-1.0 / u),
            Divergence::Js => {
                let e = u.exp();
                Ok(e / (2.0 - e))
            }
            Divergence::Hl => {
                let d = 1.0 - u;
                Ok(1.0 / (d * d))
            }
            Divergence::Ch => Ok(u / 2.0 + 1.0),
            Divergence::Interpolated(_) => Err(FtsneError::Unsupported(
                "interpolated divergence has no conjugate-dual form".into(),
            )),
        }
    }

    /// Output activation `h(raw)` mapping a raw score into the domain of
    /// `f*`. Total on finite input and stable for `|raw|` up to 500.
    ///
    /// The JS and HL activations approach an open boundary (`log 2` and
    /// `1`); in f64 they would round onto it for large raw scores, so the
    /// gap to the boundary is floored at 1e-15 to keep `f*` finite.
    pub fn activation(&self, raw: f64) -> Result<f64> {
        const BOUNDARY_GAP: f64 = 1e-15;
        match *self {
            Divergence::Kl | Divergence::Ch => Ok(raw),
            Divergence::Rkl => Ok(-(-raw).exp()),
            // log 2 - log(1 + exp(-x)) in log-sum-exp form
            Divergence::Js => Ok(LN_2 - softplus(-raw).max(BOUNDARY_GAP)),
            Divergence::Hl => Ok(1.0 - (-raw).exp().max(BOUNDARY_GAP)),
            Divergence::Interpolated(_) => Err(FtsneError::Unsupported(
                "interpolated divergence has no output activation".into(),
            )),
        }
    }

    /// Derivative `h'(raw)` of the output activation.
    pub fn activation_prime(&self, raw: f64) -> Result<f64> {
        match *self {
            Divergence::Kl | Divergence::Ch => Ok(1.0),
            Divergence::Rkl => Ok((-raw).exp()),
            Divergence::Js => Ok(1.0 / (1.0 + raw.exp())),
            Divergence::Hl => Ok((-raw).exp()),
            Divergence::Interpolated(_) => Err(FtsneError::Unsupported(
                "interpolated divergence has no output activation".into(),
            )),
        }
    }

    /// One term `q * f(p/q)` of the primal sum, with the `p -> 0` limit
    /// taken analytically: KL and interpolated-at-1 vanish, CH and HL tend
    /// to `q`, JS to `q log 2`, and RKL (and any interpolation with RKL
    /// weight) diverges to `+inf`.
    pub fn primal_term(&self, p: f64, q: f64) -> Result<f64> {
        if q <= 0.0 {
            return Err(FtsneError::Domain {
                divergence: self.to_string(),
                what: "off-diagonal q",
                value: q,
            });
        }
        if p == 0.0 {
            return Ok(match *self {
                Divergence::Kl => 0.0,
                Divergence::Rkl => f64::INFINITY,
                Divergence::Js => q * LN_2,
                Divergence::Ch | Divergence::Hl => q,
                Divergence::Interpolated(alpha) => {
                    if alpha < 1.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                }
            });
        }
        Ok(q * self.f(p / q)?)
    }

    /// Fused evaluation of one loss term `q f(p/q)` and its q-derivative
    /// `g = f(t) - t f'(t)`, sharing the transcendental calls. This is
    /// the optimizer's hot path; it must agree with
    /// [`Self::primal_term`] and [`Self::gradient_term`] exactly.
    pub fn pair_terms(&self, p: f64, q: f64) -> Result<(f64, f64)> {
        if q <= 0.0 {
            return Err(FtsneError::Domain {
                divergence: self.to_string(),
                what: "off-diagonal q",
                value: q,
            });
        }
        if p == 0.0 {
            return match *self {
                Divergence::Kl => Ok((0.0, 0.0)),
                Divergence::Interpolated(alpha) if alpha == 1.0 => Ok((0.0, 0.0)),
                Divergence::Js => Ok((q * LN_2, LN_2)),
                Divergence::Ch | Divergence::Hl => Ok((q, 1.0)),
                Divergence::Rkl | Divergence::Interpolated(_) => Err(FtsneError::Domain {
                    divergence: self.to_string(),
                    what: "p/q ratio",
                    value: 0.0,
                }),
            };
        }
        let t = p / q;
        Ok(match *self {
            Divergence::Kl => {
                let lt = t.ln();
                (p * lt, -t)
            }
            Divergence::Rkl => {
                let lt = t.ln();
                (-q * lt, 1.0 - lt)
            }
            Divergence::Js => {
                // g simplifies to log(2 / (1 + t))
                let l1t = (1.0 + t).ln();
                (q * ((t + 1.0) * (LN_2 - l1t) + t * t.ln()), LN_2 - l1t)
            }
            Divergence::Ch => {
                let d = t - 1.0;
                (q * d * d, 1.0 - t * t)
            }
            Divergence::Hl => {
                let s = t.sqrt();
                let d = s - 1.0;
                (q * d * d, 1.0 - s)
            }
            Divergence::Interpolated(alpha) => {
                let lt = t.ln();
                (
                    alpha * p * lt + (1.0 - alpha) * (-q * lt),
                    alpha * (-t) + (1.0 - alpha) * (1.0 - lt),
                )
            }
        })
    }

    /// One term `g = f(t) - t f'(t)` (the derivative of `q f(p/q)` with
    /// respect to `q`), with the `p -> 0` limit taken analytically.
    /// RKL-weighted cases diverge, so the domain error propagates.
    pub fn gradient_term(&self, p: f64, q: f64) -> Result<f64> {
        if q <= 0.0 {
            return Err(FtsneError::Domain {
                divergence: self.to_string(),
                what: "off-diagonal q",
                value: q,
            });
        }
        if p == 0.0 {
            return match *self {
                Divergence::Kl => Ok(0.0),
                Divergence::Js => Ok(LN_2),
                Divergence::Ch | Divergence::Hl => Ok(1.0),
                Divergence::Rkl => Err(FtsneError::Domain {
                    divergence: self.to_string(),
                    what: "p/q ratio",
                    value: 0.0,
                }),
                Divergence::Interpolated(alpha) => {
                    if alpha < 1.0 {
                        Err(FtsneError::Domain {
                            divergence: self.to_string(),
                            what: "p/q ratio",
                            value: 0.0,
                        })
                    } else {
                        Ok(0.0)
                    }
                }
            };
        }
        let t = p / q;
        Ok(self.f(t)? - t * self.f_prime(t)?)
    }
}

/// Numerically stable `log(1 + exp(x))`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Divergence::Kl => write!(f, "kl"),
            Divergence::Rkl => write!(f, "rkl"),
            Divergence::Js => write!(f, "js"),
            Divergence::Ch => write!(f, "ch"),
            Divergence::Hl => write!(f, "hl"),
            Divergence::Interpolated(a) => write!(f, "interp:{a}"),
        }
    }
}

impl FromStr for Divergence {
    type Err = FtsneError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(Divergence::Kl),
            "rkl" => Ok(Divergence::Rkl),
            "js" => Ok(Divergence::Js),
            "ch" | "cs" => Ok(Divergence::Ch),
            "hl" => Ok(Divergence::Hl),
            other => {
                if let Some(a) = other.strip_prefix("interp:") {
                    let alpha: f64 = a.parse().map_err(|_| {
                        FtsneError::Parameter(format!("bad interpolation alpha '{a}'"))
                    })?;
                    Divergence::interpolated(alpha)
                } else {
                    Err(FtsneError::Parameter(format!(
                        "unknown divergence '{other}' (expected kl|rkl|js|ch|hl|interp:ALPHA)"
                    )))
                }
            }
        }
    }
}

/// `D_f(P || Q) = sum_{i != j} q_ij f(p_ij / q_ij)` over two matching
/// joint pair distributions. Off-diagonal `q` must be strictly positive.
///
/// Returns `+inf` when a zero `p` entry makes a term diverge (RKL-type
/// limits); NaN anywhere is a numeric error.
pub fn primal_divergence(div: Divergence, p: &Mat, q: &Mat) -> Result<f64> {
    if p.rows() != q.rows() || p.cols() != q.cols() || p.rows() != p.cols() {
        return Err(FtsneError::Parameter(
            "P and Q must be square matrices of equal shape".into(),
        ));
    }
    let m = p.rows();
    let row_sums = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..m {
                if i == j {
                    continue;
                }
                acc += div.primal_term(p.get(i, j), q.get(i, j))?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?;
    let total = pairwise_sum(&row_sums);
    if total.is_nan() {
        return Err(FtsneError::Numeric(format!(
            "NaN while evaluating {div} divergence"
        )));
    }
    Ok(total)
}

/// Loss and gradient surfaces of a single pair term over a (p, q) grid.
///
/// `loss[i][j] = q_j f(p_i / q_j)` and
/// `grad[i][j] = f(p_i / q_j) - (p_i / q_j) f'(p_i / q_j)`,
/// i.e. the derivative of the loss term with respect to q.
pub struct HeatmapGrids {
    pub p_values: Vec<f64>,
    pub q_values: Vec<f64>,
    pub loss: Mat,
    pub gradient: Mat,
}

/// Default grid bounds: p, q log-spaced in [1e-4, 1e-1].
pub const HEATMAP_DEFAULT_RANGE: (f64, f64) = (1e-4, 1e-1);
/// Default grid resolution (100 x 100).
pub const HEATMAP_DEFAULT_RESOLUTION: usize = 100;

/// Evaluates the pairwise loss and its q-gradient over log-spaced grids.
pub fn heatmap_grids(
    div: Divergence,
    p_range: (f64, f64),
    q_range: (f64, f64),
    resolution: usize,
) -> Result<HeatmapGrids> {
    if resolution < 2 {
        return Err(FtsneError::Parameter(format!(
            "heatmap resolution must be >= 2, got {resolution}"
        )));
    }
    for (lo, hi) in [p_range, q_range] {
        if !(lo > 0.0 && hi > lo) {
            return Err(FtsneError::Parameter(format!(
                "heatmap range must satisfy 0 < lo < hi, got ({lo}, {hi})"
            )));
        }
    }
    let log_space = |(lo, hi): (f64, f64)| -> Vec<f64> {
        let (llo, lhi) = (f64::ln(lo), f64::ln(hi));
        (0..resolution)
            .map(|i| (llo + (lhi - llo) * i as f64 / (resolution - 1) as f64).exp())
            .collect()
    };
    let p_values = log_space(p_range);
    let q_values = log_space(q_range);
    let mut loss = Mat::zeros(resolution, resolution);
    let mut gradient = Mat::zeros(resolution, resolution);
    for (i, &p) in p_values.iter().enumerate() {
        for (j, &q) in q_values.iter().enumerate() {
            loss.set(i, j, div.primal_term(p, q)?);
            gradient.set(i, j, div.gradient_term(p, q)?);
        }
    }
    Ok(HeatmapGrids {
        p_values,
        q_values,
        loss,
        gradient,
    })
}

/// All five named divergences (dual-capable set).
pub const NAMED_DIVERGENCES: [Divergence; 5] = [
    Divergence::Kl,
    Divergence::Rkl,
    Divergence::Js,
    Divergence::Ch,
    Divergence::Hl,
];
