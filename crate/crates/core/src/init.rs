//! Seeded parameter initialization.
//!
//! Every parameter draws from its own generator keyed by `(seed, name)`, so a
//! tensor's initial value does not depend on which other parameters a model
//! variant happens to create.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// FNV-1a, used only to turn a parameter name into a stream id.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_hash(name));
    rng
}

/// `uniform(-bound, bound)` of the given shape.
pub fn uniform(seed: u64, name: &str, shape: &[usize], bound: f64) -> Tensor {
    Tensor::uniform(shape, -bound, bound, &mut param_rng(seed, name))
}
