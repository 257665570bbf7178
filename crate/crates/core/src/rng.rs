//! Labeled, splittable random streams.
//!
//! Every consumer of randomness receives its own ChaCha8 generator whose key is derived
//! from a 64-bit root seed and a path of labels (strings or indices). Two paths that
//! differ anywhere yield independent streams, and the mapping never depends on thread
//! scheduling, so results are reproducible for any degree of parallelism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A position in the stream tree. Cheap to copy; derive children with [`Stream::label`]
/// and [`Stream::index`], then call [`Stream::rng`] to obtain a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn root(seed: u64) -> Self {
        Stream {
            key: splitmix64(seed ^ 0x5eed_5eed_5eed_5eed),
        }
    }

    pub fn label(self, name: &str) -> Self {
        Stream {
            key: splitmix64(self.key ^ fnv1a(name.as_bytes()).rotate_left(17)),
        }
    }

    pub fn index(self, i: u64) -> Self {
        Stream {
            key: splitmix64(self.key.rotate_left(29) ^ splitmix64(i ^ 0xa076_1d64_78bd_642f)),
        }
    }

    /// A 64-bit seed for APIs that take one, derived from this position.
    pub fn seed(self) -> u64 {
        splitmix64(self.key ^ 0x243f_6a88_85a3_08d3)
    }

    pub fn rng(self) -> StreamRng {
        let mut seed = [0u8; 32];
        let mut k = self.key;
        for chunk in seed.chunks_mut(8) {
            k = splitmix64(k);
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
