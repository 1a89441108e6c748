//! Shared fixtures for the criterion benchmarks.

use labeldiff::data::{synth_generate, Image, SynthSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `n` synthetic desk-preset images.
pub fn desk_images(n: usize) -> Vec<Image> {
    synth_generate(&SynthSpec {
        count: n.max(4),
        ..SynthSpec::desk(0)
    })
    .expect("desk synthesis parameters are valid")
    .images
    .into_iter()
    .take(n)
    .map(|im| im.normalized())
    .collect()
}

/// `len` uniform values in `[-1, 1)`.
pub fn uniform(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
