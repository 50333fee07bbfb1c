//! Synthetic inputs shared by the benchmarks.

use pnml_core::erm::softmax;
use pnml_core::{EmbeddingMatrix, ProbVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `rows x cols` matrix of standard normal entries.
pub fn gaussian_embeddings(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    EmbeddingMatrix::new(rows, cols, data).expect("finite entries")
}

/// Softmax of random logits with the given spread.
pub fn random_probs(rows: usize, classes: usize, spread: f64, seed: u64) -> Vec<ProbVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| {
            let z: Vec<f64> = (0..classes)
                .map(|_| spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            softmax(&z).expect("finite logits")
        })
        .collect()
}

/// IND and OOD score lists whose means differ by `shift`.
pub fn score_lists(n: usize, shift: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ind = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let ood = (0..n)
        .map(|_| shift + rng.sample::<f64, _>(StandardNormal))
        .collect();
    (ind, ood)
}
