//! Counter-style random streams.
//!
//! A stream is addressed by `(seed, index, purpose)`: the ChaCha key holds the
//! seed and the index, and the purpose selects the ChaCha stream. Any episode
//! (or training step) can therefore be regenerated on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share random draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    NovelClasses,
    NovelClass(u32),
    BaseDraw,
    Views,
    Batches,
    Init,
    Synth,
    Shuffle,
}

impl Purpose {
    fn stream_id(self) -> u64 {
        match self {
            Purpose::NovelClasses => 1,
            Purpose::BaseDraw => 2,
            Purpose::Views => 3,
            Purpose::Batches => 4,
            Purpose::Init => 5,
            Purpose::Synth => 6,
            Purpose::Shuffle => 7,
            Purpose::NovelClass(c) => (1 << 32) | c as u64,
        }
    }
}

pub fn keyed_rng(seed: u64, index: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(purpose.stream_id());
    rng
}
