//! Detection of persistent land-cover change (forest clear-cuts) in
//! co-registered optical/radar raster time series.
//!
//! The pipeline has three stages:
//!
//! 1. **Optical anomaly maps** ([`kl`]): the nominal state of the scene is
//!    learned from a training stack as the eigenstructure of the per-pixel
//!    covariance; test observations are projected onto the residual
//!    eigenspace and the residual magnitude is the anomaly signal, with
//!    distribution-free Chebyshev-style thresholds.
//! 2. **Radar denoising** ([`sar`]): backscatter stacks are cleaned by a
//!    Bayesian MAP filter with spatial (Laplacian) and temporal (random-walk)
//!    priors, solved with preconditioned conjugate gradients.
//! 3. **State tracking** ([`hmm`]): per pixel, thresholded optical/radar bits
//!    on a merged timeline drive a 4-state hidden Markov model; Viterbi
//!    decoding plus a persistence rule confirms change dates.
//!
//! [`validation`] provides stratified sampling and accuracy metrics,
//! [`synth`] generates seeded scenes with ground truth, and [`pipeline`]
//! orchestrates end-to-end runs for the CLI.
//!
//! All data-parallel loops run on rayon when the `parallel` feature (default)
//! is enabled and fall back to sequential iteration otherwise; results are
//! identical either way.

pub mod error;
pub mod hmm;
pub mod kl;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod raster;
pub mod rng;
pub mod sar;
pub mod synth;
pub mod validation;

pub use error::{Error, Result};

// Re-exported so downstream crates build stacks without pinning their own
// copy of the array library.
pub use ndarray;
