//! MetaPerturb: a meta-learned, transferable perturbation function for
//! convolutional networks.
//!
//! The perturbation multiplies feature maps by `s ∘ z`, where `z` is
//! input-dependent softplus noise generated by a channel-permutation-equivariant
//! convolution and `s` is a batch-dependent per-channel gate. Its 82 parameters
//! are shared across layers, architectures and tasks, and are learned jointly
//! with several task networks under a stop-gradient objective.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

mod bytes;
pub mod cli;
pub mod data;
pub mod error;
pub mod models;
pub mod perturbation;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Seeded generator used for every stochastic choice in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// First eight bytes (little-endian) of the SHA-256 digest of `data`.
///
/// Used wherever an artifact embeds a hash that must be stable across
/// platforms and toolchains.
pub fn stable_hash64(data: &[u8]) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(data);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
