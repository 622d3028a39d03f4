//! Seeded, splittable random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the
//! root seed, so reordering or parallelizing consumers never changes what any
//! one of them draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Factory for independent named streams under one root seed.
#[derive(Clone, Copy, Debug)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        SeedStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}

/// Uniform draw in [0, 1).
pub fn uniform(rng: &mut impl Rng) -> f64 {
    rng.gen::<f64>()
}

/// Standard normal via Box-Muller. Two uniforms per draw, no cached spare.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // in (0, 1]
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn fill_normal(rng: &mut impl Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = normal(rng);
    }
}
