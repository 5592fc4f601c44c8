//! Counter-derived random substreams.
//!
//! A single root seed fans out into independent ChaCha streams keyed by
//! `(input, batch, particle, purpose)`, so results never depend on the order in
//! which batches or particles are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep streams for different consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    InitialNoise = 1,
    Churn = 2,
    Conditioning = 3,
    Clustering = 4,
    Jitter = 5,
    Training = 6,
    Generator = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with an arbitrary list of counters.
pub fn derive_seed(root: u64, counters: &[u64]) -> u64 {
    counters
        .iter()
        .fold(splitmix64(root), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn substream(root: u64, stream: Stream, input: u64, batch: u64, particle: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, &[stream as u64, input, batch, particle]))
}
