//! Particle-filter correction of diffusion-style samplers.
//!
//! The crate couples a reverse-time sampler (EDM-style churn sampler or the
//! Restart sampler) with a sequential Monte Carlo loop whose resampling
//! weights are ratios of correction terms `phi_t = p(x_t | c) / q(x_t | c)`.
//! Everything is exercised on analytic Gaussian-mixture worlds where the
//! ground truth `p`, the imperfect model `q`, their scores, the MMSE denoiser
//! and an object detector are all available in closed form.
//!
//! Module map:
//!
//! - [`schedules`]: noise schedules, time grids, score reparameterization.
//! - [`toyworld`]: the analytic mixture world and the discrete micro-world.
//! - [`sampling`]: score providers, EDM and Restart samplers with hooks.
//! - [`guidance`]: discriminators, kappa statistics, correction terms.
//! - [`particlefilter`]: propose / weight / resample loop.
//! - [`baselines`]: ObjectSelect, D-Select, D-Guidance.
//! - [`metrics`]: occurrence, Frechet score, TV, ESS, energy test.
//! - [`experiment`]: method dispatch over batches of conditions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod metrics;
pub mod particlefilter;
pub mod rng;
pub mod sampling;
pub mod schedules;
pub mod toyworld;

pub use error::{Error, Result};
