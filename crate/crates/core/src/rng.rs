//! Every random draw in a run comes from one seed, split into independent
//! ChaCha streams by purpose so that, e.g., stage resampling never shifts the
//! dropout masks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    SubsetSampling = 1,
    Featurize = 2,
    Training = 3,
    StageSampling = 4,
    Synthetic = 5,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
