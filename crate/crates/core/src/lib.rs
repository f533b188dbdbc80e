//! Sequential targeting for imbalanced text classification.
//!
//! Training data is partitioned into disjoint splits ordered by decreasing
//! KL divergence from a target class distribution, and a single classifier
//! is trained across the splits in order with an elastic weight
//! consolidation penalty anchoring each task to the previous optimum.
//! Random over/undersampling and EDA-style text augmentation are provided
//! as baselines, along with an experiment harness that runs seeded trials
//! and writes CSV results.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to the type the harness uses.

// Negated float comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod corpus;
pub mod error;
pub mod featurizer;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod resample;
pub mod scalar;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ClassDistribution = corpus::ClassDistribution<f64>;
pub type TargetDistribution = partition::TargetDistribution<f64>;
pub type SplitConfig = partition::SplitConfig<f64>;
pub type SplitPlan = partition::SplitPlan<f64>;
pub type ModelState = model::ModelState<f64>;
pub type ModelStateF32 = model::ModelState<f32>;
pub type EwcAnchor = trainer::EwcAnchor<f64>;
pub type EwcAnchorF32 = trainer::EwcAnchor<f32>;
pub type MetricsReport = metrics::MetricsReport<f64>;

/// Deterministic RNG used for every seeded operation.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Build a seeded RNG on an independent stream.
pub fn seeded_rng(seed: u64, stream: u64) -> SeededRng {
    use rand::SeedableRng;
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
