//! Deterministic seed derivation.
//!
//! Every random decision in the simulator draws from a ChaCha stream seeded
//! through [`mix`], which hashes a list of integers (master seed, purpose
//! tag, client id, round index, ...) into one 64-bit seed. Distinct purposes
//! get distinct tags, so client training, data synthesis, partitioning, and
//! attack sampling never share a stream and can run in any order, on any
//! number of threads, without perturbing each other.

/// Purpose tag for model initialisation during pretraining.
pub const STREAM_INIT: u64 = 1;
/// Purpose tag for pretraining epochs on the server subset.
pub const STREAM_PRETRAIN: u64 = 2;
/// Purpose tag for local client training; mixed with client id and round.
pub const STREAM_CLIENT: u64 = 3;
/// Purpose tag for synthetic training data.
pub const STREAM_SYNTH_TRAIN: u64 = 4;
/// Purpose tag for synthetic test data.
pub const STREAM_SYNTH_TEST: u64 = 5;
/// Purpose tag for the IID partition shuffle.
pub const STREAM_PARTITION: u64 = 6;
/// Purpose tag for per-client attack sampling.
pub const STREAM_ATTACK: u64 = 7;
/// Purpose tag for choosing which test examples receive the trigger.
pub const STREAM_TRIGGER_TEST: u64 = 8;
/// Purpose tag for desk-scale subsampling of a large training set.
pub const STREAM_SUBSAMPLE: u64 = 9;

/// One step of the splitmix64 generator, used here as a mixing function.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of integers into a single seed.
///
/// `mix(&[a, b])` and `mix(&[b, a])` differ, so callers encode position as
/// well as value. An empty slice maps to `splitmix64(0)`.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0u64;
    for &part in parts {
        acc = splitmix64(acc ^ part);
    }
    acc
}
