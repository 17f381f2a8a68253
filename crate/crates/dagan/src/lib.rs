//! Dual-attentive adversarial change detection on bi-temporal imagery.
//!
//! The crate pairs a siamese residual encoder with aggregate skip
//! connections, two attention blocks (multi-scale atrous fusion and a
//! spatial-relation refiner), a decoder with deep supervision, and a compact
//! convolutional discriminator trained adversarially against the detector.
//! Everything runs on a small f64 reverse-mode autodiff core over `ndarray`,
//! so training is deterministic and every gradient is finite-difference
//! checkable.
//!
//! Entry points:
//! - [`data`]: bi-temporal samples, tiling, splits, augmentation, synthesis.
//! - [`generator`]: the full change detector ([`generator::DaNet`]).
//! - [`discriminator`]: the adversarial critic.
//! - [`trainer`]: optimization loop, schedules, self-training rounds.
//! - [`metrics`]: confusion-matrix scores (F1, kappa, IoU, ...).
//! - [`cli`]: the `dagan` command-line front end.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};

/// The one RNG used everywhere: a seeded counter-based stream cipher, so
/// every draw is reproducible across platforms and sessions.
pub fn rng_from_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
