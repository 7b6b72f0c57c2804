//! Seeded random streams and weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Shape5, Tensor5};

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Independent random stream for `(seed, name, index)`. Consumers drawing
/// from different names never perturb each other.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(fnv1a(name));
    rng
}

/// He-normal init for a `(Cout, Cin, 3, 3, 3)` kernel: std = sqrt(2 / fan_in).
pub fn kaiming<T: Real>(shape: Shape5, rng: &mut ChaCha8Rng) -> Tensor5<T> {
    let fan_in = (shape.numel() / shape.batch()) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    Tensor5::from_fn(shape, |_| T::of(normal.sample(rng)))
}
