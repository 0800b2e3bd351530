//! Deterministic randomness.
//!
//! Every run owns a single 64-bit seed. All randomness is drawn from ChaCha8
//! streams derived from that seed plus a purpose label, so changing how much
//! randomness one component consumes never perturbs any other component.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Root of all randomness for one run.
#[derive(Debug, Clone, Copy)]
pub struct RunRng {
    seed: u64,
}

impl RunRng {
    pub fn new(seed: u64) -> Self {
        RunRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A generator dedicated to one purpose, e.g. `"train-shuffle"`.
    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        self.stream_at(label, 0)
    }

    /// A generator for one purpose at one index (trial number, task number,
    /// pair number). Distinct (label, index) pairs give independent streams.
    pub fn stream_at(&self, label: &str, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut id = fnv1a64(0, label.as_bytes());
        for b in index.to_le_bytes() {
            id ^= u64::from(b);
            id = id.wrapping_mul(FNV_PRIME);
        }
        rng.set_stream(id);
        rng
    }

    /// A derived root for a nested scope (e.g. one trial of a multi-trial
    /// experiment) that must itself hand out labeled streams.
    pub fn derive(&self, label: &str, index: u64) -> RunRng {
        let mut h = fnv1a64(self.seed, label.as_bytes());
        for b in index.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        RunRng { seed: h }
    }
}
