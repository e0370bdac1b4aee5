#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Statistical dynamic calibration of nonlinear, drifting sensors.
//!
//! A Gaussian-process posterior maps a window of raw sensor outputs plus the
//! elapsed deployment time to a mean and variance of the sensed quantity.
//! Hyperparameters are chosen by empirical Bayes, and the calibration dataset
//! can be maintained online at fixed size. A synthetic drifting sensor and a
//! glucose-profile generator drive the bundled experiments.

pub mod artifact;
pub mod error;
pub mod eval;
pub mod gp;
pub mod hyperopt;
pub mod linalg;
pub mod online;
pub mod pipeline;
pub mod sim;
pub mod windowing;

pub use error::{Error, Result};
pub use gp::{CalibrationSample, FeatureVector, Hyperparameters, PosteriorEstimate, SdcmModel};

/// Deterministically derives an independent seed for sub-stream `stream`
/// (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
