//! Seeded, splittable random streams.
//!
//! Every consumer asks for a `(seed, stream)` pair. Streams are independent
//! ChaCha8 sequences, so drawing more from one stream never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Fixed stream ids.
pub mod stream {
    pub const TRAIN_TASKS: u64 = 1;
    pub const TRAIN_PROMPTS: u64 = 2;
    pub const VAL_TASKS: u64 = 3;
    pub const INIT: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const RADEMACHER: u64 = 6;
    pub const MONTE_CARLO: u64 = 7;
    /// Validation prompts for evaluation seed `s` use `VAL_PROMPTS_BASE + s`.
    pub const VAL_PROMPTS_BASE: u64 = 1 << 32;
}

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent per-item stream inside a family, e.g. one per Monte-Carlo trial.
pub fn substream_rng(seed: u64, stream: u64, index: u64) -> Rng {
    debug_assert!(index < 1 << 40);
    stream_rng(seed, (stream << 40) | index)
}
