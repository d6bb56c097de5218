use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::Matrix;

/// Entry distribution for [`seeded_random_matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Uniform on `(-scale, scale)`.
    Uniform { scale: f32 },
    /// Normal with mean 0.
    Gaussian { std: f32 },
}

/// The crate-wide deterministic RNG (ChaCha8, counter based).
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic random matrix: identical `(rows, cols, seed, dist)` always
/// yields bitwise-identical output.
pub fn seeded_random_matrix(rows: usize, cols: usize, seed: u64, dist: Distribution) -> Matrix {
    let mut rng = seeded_rng(seed);
    let n = rows * cols;
    let data: Vec<f32> = match dist {
        Distribution::Uniform { scale } if scale > 0.0 => {
            let u = Uniform::new(-scale, scale).expect("positive uniform range");
            (0..n).map(|_| u.sample(&mut rng)).collect()
        }
        Distribution::Gaussian { std } if std > 0.0 => {
            let g = Normal::new(0.0f32, std).expect("finite positive std");
            (0..n).map(|_| g.sample(&mut rng)).collect()
        }
        // degenerate spread collapses to zeros
        _ => vec![0.0; n],
    };
    Matrix::new(rows, cols, data).expect("length matches shape")
}
