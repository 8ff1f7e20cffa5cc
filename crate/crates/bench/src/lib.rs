//! Shared fixtures for the criterion benches.

use mwal_core::dataio::{generate_synthetic, Distortion, SynthSpec};
use mwal_core::EmbeddingMatrix;

/// `m` noisy rotated copies of one latent matrix, `n × d` each.
pub fn fixture(m: usize, n: usize, d: usize, seed: u64) -> Vec<EmbeddingMatrix> {
    let mut spec = SynthSpec::new(m, n, d, d);
    spec.noise_sigma = 0.2;
    spec.distortion = Distortion::OrthogonalOnly;
    spec.seed = seed;
    generate_synthetic(&spec).expect("valid bench spec").train
}
