//! Deterministic random streams.
//!
//! Frozen weights come from a stateless counter-based generator so any entry can be
//! regenerated from `(seed, layer, index)` on any platform. Everything else (client
//! training, participant selection, partitioning) draws from ChaCha8 streams whose
//! seeds are derived from the master seed and a stream tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name and version of the counter-based generator used for frozen weights.
/// Changing the mixing below requires bumping this.
pub const WEIGHT_GENERATOR: &str = "splitmix64-counter-v1";

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64 pseudo-random bits addressed by `(seed, layer, index)`.
#[inline]
pub fn counter_bits(seed: u64, layer: u64, index: u64) -> u64 {
    let key = splitmix64(seed ^ splitmix64(layer.wrapping_mul(GOLDEN) ^ 0x5EED_1A7E));
    splitmix64(key ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Purpose tag of a derived stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Seed of the frozen network.
    Weights,
    /// Server score initialization.
    ServerInit,
    /// Per-round participant selection.
    Participants,
    /// Client local training: index packs (round, client).
    Client,
    /// Data partitioning.
    Partition,
    /// Final-model and per-round evaluation sampling.
    Distill,
    /// Differential privacy noise.
    Privacy,
    /// Synthetic data generation.
    Data,
    /// SignSGD baseline dense initialization.
    Baseline,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Weights => 1,
            Stream::ServerInit => 2,
            Stream::Participants => 3,
            Stream::Client => 4,
            Stream::Partition => 5,
            Stream::Distill => 6,
            Stream::Privacy => 7,
            Stream::Data => 8,
            Stream::Baseline => 9,
        }
    }
}

/// Derive a 64-bit sub-seed from the master seed, a stream tag and an index.
pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    counter_bits(master, 0x1000 + stream.tag(), index)
}

/// Open a ChaCha8 stream for `(master, stream, index)`.
pub fn stream_rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Pack a (round, client) pair into one stream index.
pub fn round_client_index(round: usize, client: usize) -> u64 {
    ((round as u64) << 32) | (client as u64 & 0xFFFF_FFFF)
}
