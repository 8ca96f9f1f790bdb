//! Counter-based random streams: `(seed, index)` always yields the same
//! sequence, so work split across threads matches a serial run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::net::{Architecture, Params};

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A uniformly distributed unit direction in parameter space.
pub fn unit_direction(arch: &Architecture, rng: &mut ChaCha8Rng) -> Params {
    loop {
        let mut p = Params::zeros(arch);
        for v in p.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = p.norm();
        if n > 0.0 {
            p.scale(1.0 / n);
            return p;
        }
    }
}
