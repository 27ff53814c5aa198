use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use crate::gradcheck::{max_grad_error, FD_TOL};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
