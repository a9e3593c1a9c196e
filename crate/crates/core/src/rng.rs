//! Reproducible random streams.
//!
//! Every trajectory draws from its own ChaCha8 stream keyed by
//! `(master_seed, index)`. Streams are independent of scheduling, so a
//! parallel run consumes exactly the numbers a sequential run would.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RngStream = ChaCha8Rng;

/// The stream for trajectory `index` under `master_seed`.
pub fn stream(master_seed: u64, index: u64) -> RngStream {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}
