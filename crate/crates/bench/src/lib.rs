//! Fixtures shared by the benchmarks.

use fpfl_core::template::random_template;
use fpfl_core::{build_gallery, FixedTemplate, Gallery};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `n` random unit templates of dimension `dim`, ids `g0..g{n-1}`.
pub fn random_gallery(n: usize, dim: usize, seed: u64) -> Gallery {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_gallery((0..n).map(|i| (format!("g{i}"), random_template(&mut rng, dim))).collect())
        .expect("random templates are valid")
}

pub fn random_queries(n: usize, dim: usize, seed: u64) -> Vec<FixedTemplate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_template(&mut rng, dim)).collect()
}
