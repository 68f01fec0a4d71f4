//! Transform-invariant similarity of covariance matrices, non-parametric
//! spectral clustering of SPD datasets, and joint time-series segmentation
//! with transform-invariant state discovery.
//!
//! Labels produced by samplers are zero-based. Ground-truth labels in
//! datasets are arbitrary integers; the metrics only look at equality.

pub mod datasets;
pub mod error;
pub mod ibp_hmm;
pub mod icsc_hmm;
pub mod metrics;
pub mod spcm_crp;
pub mod spd_core;
pub mod spectral_embedding;
pub mod similarity;
mod stats;

pub use error::{Error, Result};

/// Seeded generator used throughout the crate.
pub type Rng64 = rand_chacha::ChaCha8Rng;

/// Deterministic generator from an integer seed.
pub fn rng_from_seed(seed: u64) -> Rng64 {
    use rand::SeedableRng;
    Rng64::seed_from_u64(seed)
}
