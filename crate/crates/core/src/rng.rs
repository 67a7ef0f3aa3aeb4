//! Labelled random streams.
//!
//! One 64-bit experiment seed fans out into independent streams, one per
//! consumer (initialization, shuffling, pair sampling, ...). A stream is
//! identified by the path of labels used to derive it, so adding a new
//! consumer never perturbs the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// A node in the seed tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Stream {
    seed: u64,
}

impl Stream {
    pub fn root(seed: u64) -> Self {
        Stream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `label`.
    pub fn derive(&self, label: &str) -> Stream {
        Stream {
            seed: splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes()))),
        }
    }

    /// Child stream keyed by `label` and an integer index (replicate, epoch, ...).
    pub fn derive_idx(&self, label: &str, index: u64) -> Stream {
        let base = self.derive(label);
        Stream {
            seed: splitmix64(base.seed ^ splitmix64(index.wrapping_add(1))),
        }
    }

    /// Counter-based generator for this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}
