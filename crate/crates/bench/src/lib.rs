//! Shared inputs for the benchmarks.

use scs_core::{EmbeddingBatch, FieldPartition, Matrix, SeededRng};

/// Gaussian `rows × (d_common + d_style)` embeddings with `classes`
/// interleaved labels.
pub fn random_batch(rows: usize, partition: FieldPartition, classes: usize, seed: u64) -> EmbeddingBatch {
    let mut rng = SeededRng::new(seed);
    let width = partition.width();
    let data = (0..rows * width).map(|_| rng.gaussian()).collect();
    let z = Matrix::new(rows, width, data).expect("sizes agree");
    let labels = (0..rows).map(|i| i % classes).collect();
    EmbeddingBatch::new(z, labels, partition).expect("valid batch")
}

pub fn random_input(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(seed);
    let data = (0..rows * cols).map(|_| rng.gaussian()).collect();
    Matrix::new(rows, cols, data).expect("sizes agree")
}
