//! Desk-scale vehicle re-identification built on parameter-free local graph
//! aggregation.
//!
//! The crate covers the full loop: a spatial neighborhood graph over feature-map
//! positions ([`gridgraph`]), normalized aggregation layers and pooling
//! ([`aggregate`]), class-balanced softmax and soft-margin triplet losses with
//! analytic gradients ([`losses`]), P×K identity batch sampling ([`sampler`]),
//! manifest and synthetic-data handling ([`datasets`]), an end-to-end trainable
//! model with a BN neck ([`pipeline`]), and exact mAP/CMC retrieval evaluation
//! under the standard benchmark protocols ([`evalproto`]).
//!
//! Everything is deterministic given a seed: sampling, augmentation, synthetic
//! generation, and evaluation trials all derive their randomness from explicit
//! ChaCha streams, and all reductions run in a fixed order.

pub mod aggregate;
pub mod datasets;
pub mod error;
pub mod evalproto;
pub mod gradcheck;
pub mod gridgraph;
pub mod losses;
pub mod pipeline;
pub mod sampler;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
