//! Deterministic random streams.
//!
//! Every random draw in the library comes from a ChaCha8 stream selected by a
//! `(master seed, stream id)` pair. Sub-streams (per example, per epoch, per
//! replication) are derived by hashing extra keys into the stream id, so any
//! draw can be reproduced without replaying the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `keys` into `base`; distinct key sequences give unrelated outputs.
pub fn derive(base: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// The stream `stream` of the generator keyed by `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A sub-stream of `(seed, stream_id)` addressed by `keys`.
pub fn substream(seed: u64, stream_id: u64, keys: &[u64]) -> StreamRng {
    stream(seed, derive(stream_id, keys))
}
