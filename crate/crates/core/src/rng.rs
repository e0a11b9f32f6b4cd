//! Deterministic seed derivation.
//!
//! Every stochastic stage receives a child seed derived from the global seed
//! and a stable key (stage name, label pair, layer, replicate index), so the
//! result of any cell is independent of execution order and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builder for a child seed: `SeedKey::new(seed).str("split").str(a).int(layer).finish()`.
#[derive(Debug, Clone, Copy)]
pub struct SeedKey(u64);

impl SeedKey {
    pub fn new(seed: u64) -> Self {
        SeedKey(splitmix64(seed))
    }

    pub fn str(self, s: &str) -> Self {
        // FNV-1a over the bytes, then mixed in with a length terminator.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in s.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.int(h).int(s.len() as u64)
    }

    pub fn int(self, v: u64) -> Self {
        SeedKey(splitmix64(self.0 ^ splitmix64(v)))
    }

    pub fn finish(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> Rng {
        Rng::seed_from_u64(self.0)
    }
}

/// RNG for permutation replicate `index` under `seed`.
pub fn replicate_rng(seed: u64, stage: &str, index: usize) -> Rng {
    SeedKey::new(seed).str(stage).int(index as u64).rng()
}
