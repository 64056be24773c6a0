//! Seeded random streams, one per concern.
//!
//! Paired experiment arms must see the same environment and exploration
//! draws even after their action choices diverge, so each concern gets its
//! own ChaCha stream derived from a single seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Environment = 1,
    Exploration = 2,
    Evaluation = 3,
    /// Held-out disruption rollouts after training.
    Robustness = 4,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

#[derive(Debug, Clone)]
pub struct Streams {
    pub environment: ChaCha8Rng,
    pub exploration: ChaCha8Rng,
    pub evaluation: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            environment: stream(seed, Stream::Environment),
            exploration: stream(seed, Stream::Exploration),
            evaluation: stream(seed, Stream::Evaluation),
        }
    }
}
