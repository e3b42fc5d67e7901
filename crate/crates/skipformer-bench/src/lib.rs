//! Shared fixtures for the benchmark targets.

use skipformer_core::model::{synth_model, Model, ModelConfig};
use skipformer_core::rng::SplitMix64;
use skipformer_core::{ActivationKind, Matrix, PromptInput};

/// A mid-sized seeded model: large enough that block work dominates, small
/// enough that a benchmark run stays in milliseconds.
pub fn bench_model() -> Model {
    let cfg = ModelConfig {
        n_layers: 8,
        d_model: 64,
        n_heads: 4,
        d_ff: 256,
        vocab_size: 128,
        max_positions: 128,
        activation: ActivationKind::Gelu,
        ln_eps: 1e-5,
    };
    synth_model(&cfg, 42).expect("synth")
}

/// Four perceptual rows plus a short text prompt.
pub fn bench_prompt(d_model: usize) -> PromptInput {
    let mut rng = SplitMix64::new(7);
    let data: Vec<f32> = (0..4 * d_model)
        .map(|_| (rng.next_unit() as f32 - 0.5) * 0.2)
        .collect();
    PromptInput {
        perceptual: Some(Matrix::new(4, d_model, data).expect("matrix")),
        text_token_ids: vec![3, 11, 7, 25, 90],
    }
}

/// A seeded square matrix for kernel and pruning benchmarks.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| rng.next_unit() as f32 - 0.5)
        .collect();
    Matrix::new(rows, cols, data).expect("matrix")
}
