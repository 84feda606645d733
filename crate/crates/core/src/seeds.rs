//! Named random streams derived from one experiment seed.
//!
//! Each pipeline stage draws from its own ChaCha8 stream so that, for
//! example, changing the number of sampled networks never perturbs the data
//! or the prior initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Init = 3,
    PriorShuffle = 4,
    PosteriorShuffle = 5,
    PosteriorNoise = 6,
    CertifySamples = 7,
    HoldoutSamples = 8,
    BaselineShuffle = 9,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
