//! Counter-style random streams. A stream is addressed by `(seed, salt, index)`
//! so a path's randomness never depends on which worker generated it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Real;

/// Stream salts. Distinct consumers of the same seed must not share streams.
pub(crate) mod salt {
    pub const PATHS: u64 = 1;
    pub const START: u64 = 2;
    pub const SEMIGROUP: u64 = 3;
    pub const VALIDATE: u64 = 4;
}

pub(crate) fn stream(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

#[inline]
pub(crate) fn normal<T: Real, R: rand::Rng>(rng: &mut R) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::lit(z)
}
