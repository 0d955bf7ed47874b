//! Splittable counter-based random streams.
//!
//! A stream is addressed by `(base_seed, stream_id)`; the ChaCha block
//! counter advances within it. Child stream ids are derived by hashing a
//! path of integers, so draws for group member `i` of iteration `j` do not
//! depend on the order in which members are evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub seed: u64,
    pub stream: u64,
}

impl StreamId {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Stream for a path of sub-identifiers below this one.
    pub fn child(self, path: &[u64]) -> Self {
        let mut h = splitmix64(self.stream ^ 0x5851_f42d_4c95_7f2d);
        for &p in path {
            h = splitmix64(h ^ splitmix64(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        Self {
            seed: self.seed,
            stream: h,
        }
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let base = StreamId::new(42, 0);
        let a: Vec<u64> = (0..4)
            .map({
                let mut r = base.child(&[1, 2]).rng();
                move |_| r.next_u64()
            })
            .collect();
        let b: Vec<u64> = (0..4)
            .map({
                let mut r = base.child(&[1, 2]).rng();
                move |_| r.next_u64()
            })
            .collect();
        assert_eq!(a, b);
        let mut other = base.child(&[2, 1]).rng();
        assert_ne!(a[0], other.next_u64());
    }
}
