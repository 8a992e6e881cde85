//! Dense linear algebra and seeded randomness.

mod matrix;
mod rng;

pub use matrix::{frobenius_norm, matmul, spectral_norm, Matrix, SPECTRAL_ITERS, SPECTRAL_TOL};
pub use rng::{gaussian_matrix, streams, RngStream};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer distances between two weight tuples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallDistance {
    pub per_layer: Vec<f64>,
    pub max: f64,
}

impl BallDistance {
    /// Membership in the ball of radius `omega`.
    pub fn within(&self, omega: f64) -> bool {
        self.max <= omega
    }
}

fn layerwise(a: &[Matrix], b: &[Matrix], norm: impl Fn(&Matrix) -> f64) -> Result<BallDistance> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} layers vs {} layers",
            a.len(),
            b.len()
        )));
    }
    let per_layer = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.sub(y).map(|d| norm(&d)))
        .collect::<Result<Vec<_>>>()?;
    let max = per_layer.iter().copied().fold(0.0, f64::max);
    Ok(BallDistance { per_layer, max })
}

/// Spectral norm of `a_l - b_l` for every layer, plus the maximum.
pub fn tuple_ball_distance(a: &[Matrix], b: &[Matrix]) -> Result<BallDistance> {
    layerwise(a, b, |d| d.spectral_norm(SPECTRAL_ITERS, SPECTRAL_TOL))
}

/// Frobenius counterpart of [`tuple_ball_distance`]. `max` holds the
/// largest layer; the full tuple norm is [`tuple_frobenius_sq`].
pub fn tuple_frobenius_distance(a: &[Matrix], b: &[Matrix]) -> Result<BallDistance> {
    layerwise(a, b, Matrix::frobenius_norm)
}

/// `Σ_l ‖a_l − b_l‖²_F`.
pub fn tuple_frobenius_sq(a: &[Matrix], b: &[Matrix]) -> Result<f64> {
    let d = layerwise(a, b, Matrix::frobenius_sq)?;
    Ok(d.per_layer.iter().sum())
}
