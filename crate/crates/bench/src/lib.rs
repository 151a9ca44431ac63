//! Shared input generators for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilerobust_core::store::EmbeddingMatrix;

/// Uniform `[-1, 1)` matrix, reproducible per seed.
pub fn random_slide(n_tiles: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n_tiles * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingMatrix::new(n_tiles, dim, values).expect("finite values")
}

/// `base` plus uniform noise of amplitude `noise`, as a perturbed rescan would look.
pub fn perturbed(base: &EmbeddingMatrix, noise: f32, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = base.values().iter().map(|v| v + noise * rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingMatrix::new(base.n_tiles(), base.dim(), values).expect("finite values")
}
