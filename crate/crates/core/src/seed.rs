//! Seed derivation.
//!
//! Every random draw in an experiment descends from one master seed through
//! named substreams (`data`, `init`, `attack`, `mask`, `diffusion`, ...).
//! Per-sample streams mix in the sample id so that results do not depend on
//! batching or scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines two 64-bit values into a well-mixed seed.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(a) ^ b.rotate_left(29))
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Master seed with named substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, name: &str) -> u64 {
        mix(self.master, name_hash(name))
    }

    pub fn rng(&self, name: &str) -> Rng {
        rng_from(self.stream(name))
    }

    /// Seed for one item (client, sample, round) of a named stream.
    pub fn item(&self, name: &str, id: u64) -> u64 {
        mix(self.stream(name), id)
    }

    pub fn item_rng(&self, name: &str, id: u64) -> Rng {
        rng_from(self.item(name, id))
    }

    pub fn child(&self, name: &str, id: u64) -> SeedTree {
        SeedTree::new(self.item(name, id))
    }
}
