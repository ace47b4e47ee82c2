//! Allocation-only building blocks for unified GAN compression.
//!
//! This crate holds everything that does not touch tensors or the filesystem:
//! the depth/width-dynamic search space and its architecture codes, analytic
//! MACs and parameter accounting, the evolutionary search used to pick student
//! and teacher sub-networks, the learning-rate schedule, the EMA tracker and
//! adaptive filter used during online distillation, and deterministic
//! labeled/unlabeled partitioning.
//!
//! The companion `ugc` crate builds tensors, training loops, file formats and
//! the command line on top of these types.
#![no_std]
#![forbid(unsafe_code)]
#![warn(missing_docs)]

extern crate alloc;

pub mod cost;
pub mod error;
pub mod evolution;
pub mod gate;
pub mod partition;
pub mod schedule;
pub mod space;

pub use cost::{count_macs, ConvKind, ConvLayer, CostReport};
pub use error::{CoreError, Result};
pub use evolution::{
    crossover, evolve, mutate, search_teachers, Budget, BudgetRole, EvoParams, EvolveOutcome,
    GenerationStats, Objective, TeacherPair,
};
pub use gate::{adaptive_filter, EmaTracker};
pub use partition::{partition, DatasetPartition};
pub use schedule::lr_schedule;
pub use space::{ArchCode, SearchSpaceSpec, Topology};

/// Seeds a ChaCha stream for a named sub-component of a run.
///
/// Every random decision in a run flows from one global seed; mixing in a
/// stream label and an index keeps the data order, sandwich sampling,
/// evolution and gating independently reproducible.
pub fn substream(seed: u64, label: &str, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    // FNV-1a over the label, then splitmix-style mixing with seed and index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    rand_chacha::ChaCha8Rng::seed_from_u64(z)
}
