//! Labelled deterministic random streams.
//!
//! Every consumer of randomness gets its own stream derived from the master
//! seed and a label, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha12Rng;

/// Independent stream for `(master_seed, label)`.
pub fn make_rng_stream(master_seed: u64, label: &str) -> SimRng {
    let mut h = Sha256::new();
    h.update(b"e2ediff-stream");
    h.update(master_seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    SimRng::from_seed(h.finalize().into())
}
