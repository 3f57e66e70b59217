//! Deterministic, label-addressed random streams.
//!
//! A [`SeededRng`] is a 256-bit key. Child streams are derived by hashing the
//! parent key with a label (and optionally an index), so every consumer gets
//! an independent ChaCha8 stream whose contents depend only on the root seed
//! and the label path, never on how many draws other consumers made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SeededRng {
    key: [u8; 32],
}

impl std::fmt::Debug for SeededRng {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SeededRng({:02x}{:02x}{:02x}{:02x}..)", self.key[0], self.key[1], self.key[2], self.key[3])
    }
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"mmfqkd/root");
        h.update(seed.to_le_bytes());
        Self { key: h.finalize().into() }
    }

    /// Child stream named `label`.
    pub fn substream(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        Self { key: h.finalize().into() }
    }

    /// Child stream named `label`, `index` (trial number, chunk number, ...).
    pub fn indexed(&self, label: &str, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update([0xff]);
        h.update(index.to_le_bytes());
        Self { key: h.finalize().into() }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key)
    }
}
