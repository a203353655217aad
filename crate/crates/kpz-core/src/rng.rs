use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Deterministic stream addressing: identical `(master_seed, stream_index)`
/// yields a bit-identical draw sequence regardless of how replicas are
/// scheduled across workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        Self {
            master_seed,
            stream_index,
        }
    }

    /// Replica `i` of the same master seed.
    pub fn stream(&self, stream_index: u64) -> Self {
        Self {
            master_seed: self.master_seed,
            stream_index,
        }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_index);
        rng
    }
}

/// Fill `out` with i.i.d. standard Gaussians from `rng`.
pub fn fill_standard_normal(rng: &mut ChaCha12Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}
