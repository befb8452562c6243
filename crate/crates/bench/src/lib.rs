//! Shared fixtures for the criterion benchmarks.

use civt_core::{Family, ModelSpec, Tensor};

/// Deterministic pseudo-random tensor without pulling an RNG into benches.
pub fn filled(shape: &[usize], salt: u64) -> Tensor<f32> {
    let mut state = salt.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 40) as f32 / (1u64 << 24) as f32) - 0.5
    })
}

/// The student used for the training-step benchmark: 32×32, d=64, 3 layers.
pub fn small_student() -> ModelSpec {
    ModelSpec::transformer(Family::Civt, 32, 3, 10, 64, 3, 2, 4)
}

/// A residual teacher at widths 8/16/32/64 with one block per stage.
pub fn small_teacher(family: Family) -> ModelSpec {
    ModelSpec { stage_widths: vec![8, 16, 32, 64], blocks_per_stage: 1, gn_groups: 4, inv_groups: 2, ..ModelSpec::desk_teacher(family) }
}
