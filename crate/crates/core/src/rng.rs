//! Named random streams derived from one root seed.
//!
//! Every consumer of randomness asks for its own stream by name, so
//! changing how much one component draws never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: &str = "data";
pub const DROPOUT_VIEW_1: &str = "dropout-view-1";
pub const DROPOUT_VIEW_2: &str = "dropout-view-2";
pub const INIT: &str = "init";
pub const NEGATIVES: &str = "negatives";
pub const SYNTH: &str = "synth";

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    root: u64,
}

impl SeedStreams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Independent ChaCha stream keyed by the root seed, selected by name.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root);
        rng.set_stream(stable_hash(name.as_bytes()));
        rng
    }
}
