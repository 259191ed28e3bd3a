//! Differentiable building blocks with explicit forward and backward passes.

mod conv;
mod pool;
pub mod resample;

pub use conv::{Conv2d, ConvGrad, Init};
pub use pool::{max_pool2, max_pool2_backward};
pub use resample::{upsample_density, upsample_density_backward};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent, reproducible RNG stream for the parameters of one named
/// layer. Layers keep identical initial weights across model variants that
/// share them.
pub fn layer_rng(seed: u64, layer: &str) -> ChaCha8Rng {
    // FNV-1a over the layer name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in layer.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}
