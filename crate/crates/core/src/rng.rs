//! Named random sub-streams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Initial conditions of training trajectories.
    Data,
    /// Model parameter initialization.
    Init,
    /// Minibatch sampling and pool enrichment.
    Batch,
    /// Held-out evaluation initial conditions.
    Eval,
    /// Inverse-problem starting points and targets.
    Control,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Init => 2,
            Stream::Batch => 3,
            Stream::Eval => 4,
            Stream::Control => 5,
        }
    }
}

/// Generator for `(seed, stream)`; streams never overlap for one seed.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Seed for the `index`-th member of a family (e.g. one trajectory) within a stream.
pub fn member_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng.set_word_pos(u128::from(index) * 16);
    rand::RngCore::next_u64(&mut rng)
}
