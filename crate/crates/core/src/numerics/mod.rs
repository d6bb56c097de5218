//! Dense f32 linear algebra used by every other module.

mod matrix;
mod random;
mod stacked;

pub use matrix::{matmul, matmul_nt, matmul_tn, softmax, softmax_in_place, Matrix};
pub use random::{seeded_random_matrix, seeded_rng, Distribution};
pub use stacked::StackedTensor3;

/// Frobenius-norm relative error `|a - b| / max(|b|, tiny)`.
pub fn relative_error(actual: &[f32], expected: &[f32]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "relative_error length mismatch");
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for (&a, &e) in actual.iter().zip(expected) {
        let d = a as f64 - e as f64;
        diff += d * d;
        norm += (e as f64) * (e as f64);
    }
    diff.sqrt() / norm.sqrt().max(1e-30)
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "max_abs_diff length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}
