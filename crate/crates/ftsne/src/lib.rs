//! Stochastic neighbor embeddings under f-divergences.
//!
//! This crate implements the full pipeline for low-dimensional neighbor
//! embeddings optimized under a family of f-divergences:
//!
//! * [`affinity`] — perplexity-calibrated neighborhood distributions in the
//!   data space, plus latent-space similarities for Z-metrics.
//! * [`divergence`] — the f-divergence family (generator, derivative,
//!   Fenchel conjugate, output activation) and KL/RKL interpolation.
//! * [`primal`] — Student-t embedding distribution, analytic loss gradient,
//!   and momentum gradient descent with decaying schedules.
//! * [`variational`] — the conjugate-dual lower bound optimized as an
//!   alternating minimax game against a small order-invariant network.
//! * [`metrics`] — threshold precision/recall curves, K-nearest/K-farthest
//!   precision, and the binary-neighborhood divergence model.
//! * [`datagen`] — synthetic benchmark datasets with ground-truth latents.
//! * [`config`] / [`io`] — run configuration and the CSV/JSON file formats
//!   consumed by the command-line front end.

pub mod affinity;
pub mod config;
pub mod datagen;
pub mod divergence;
pub mod error;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod primal;
pub mod variational;

pub use error::{FtsneError, Result};
