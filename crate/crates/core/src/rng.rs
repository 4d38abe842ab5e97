//! Seeded random streams.
//!
//! Every run owns independent streams for data generation, index sampling,
//! privacy noise and Monte-Carlo evaluation. Streams are ChaCha8 generators
//! seeded from a 64-bit seed and a stream tag, so results do not depend on
//! the order in which runs execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer, used to spread seeds before handing them to ChaCha.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The four independent seeds of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTuple {
    pub data: u64,
    pub sampling: u64,
    pub noise: u64,
    pub eval: u64,
}

impl SeedTuple {
    /// Seeds for repetition `rep` of an experiment with base seed `base`.
    pub fn for_repetition(base: u64, rep: u64) -> Self {
        let root = derive(base, rep);
        Self {
            data: derive(root, 1),
            sampling: derive(root, 2),
            noise: derive(root, 3),
            eval: derive(root, 4),
        }
    }

    /// Compact `data/sampling/noise/eval` form used in CSV rows.
    pub fn encode(&self) -> String {
        format!("{}/{}/{}/{}", self.data, self.sampling, self.noise, self.eval)
    }

    pub fn decode(s: &str) -> Option<Self> {
        let mut it = s.split('/').map(|p| p.trim().parse::<u64>());
        let t = Self {
            data: it.next()?.ok()?,
            sampling: it.next()?.ok()?,
            noise: it.next()?.ok()?,
            eval: it.next()?.ok()?,
        };
        if it.next().is_some() {
            return None;
        }
        Some(t)
    }
}
