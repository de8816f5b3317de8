//! Counter-based seed streams.
//!
//! A run starts from one master seed. Every random draw in the pipeline comes
//! from a stream derived by hashing a path of integer labels onto it:
//!
//! ```text
//! master -> Stream::Truth
//!        -> Stream::Sampling -> epoch -> stage -> task index
//!        -> Stream::Training -> epoch -> stage
//!        -> Stream::Eval     -> checkpoint
//! ```
//!
//! Each `child` call mixes the parent key with the label through SplitMix64, so
//! two paths that differ in any label give unrelated generators, and the same
//! path always gives the same generator regardless of call order.
//!
//! The `Eval` stream depends only on the master seed, so every strategy and
//! every checkpoint of one run is scored on the same held-out target draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Top-level stream names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Truth = 1,
    Sampling = 2,
    Training = 3,
    Eval = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    key: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        Self {
            key: splitmix64(master),
        }
    }

    pub fn stream(&self, s: Stream) -> Self {
        self.child(s as u64)
    }

    pub fn child(&self, label: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(label.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }

    pub fn key(&self) -> u64 {
        self.key
    }
}
