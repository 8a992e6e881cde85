use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, RngStream};

use super::Dataset;

/// Consecutive rejections tolerated before a point is declared unplaceable.
/// Bounds the total work by `MAX_ATTEMPTS_PER_POINT · n` candidates.
pub const MAX_ATTEMPTS_PER_POINT: usize = 1000;

/// `n` points uniform on the unit sphere in `R^d`, pairwise at least `phi`
/// apart, with targets `y = T x` from a Gaussian teacher `T` (`o×d`).
///
/// The teacher is drawn first, then candidates are sampled by normalizing
/// Gaussian vectors and rejected when closer than `phi` to an accepted
/// point. Each example's class label is `argmax_k y_k`.
pub fn gen_separable(
    n: usize,
    d: usize,
    o: usize,
    phi: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if d < 2 {
        return Err(Error::InvalidArgument("gen_separable needs d >= 2".into()));
    }
    if o < 1 {
        return Err(Error::InvalidArgument("gen_separable needs o >= 1".into()));
    }
    if !(0.0..2.0).contains(&phi) {
        return Err(Error::InvalidArgument(format!(
            "phi = {phi} outside [0, 2)"
        )));
    }
    let teacher = gaussian_matrix(o, d, 1.0, rng);
    let phi_sq = phi * phi;

    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while inputs.len() < n {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS_PER_POINT {
            attempts += 1;
            let candidate = random_unit_vector(d, rng);
            let clear = inputs.iter().all(|x| {
                let d2: f64 = x
                    .iter()
                    .zip(&candidate)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2 >= phi_sq
            });
            if clear {
                inputs.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::PackingInfeasible {
                accepted: inputs.len(),
                requested: n,
                attempts,
            });
        }
    }

    let targets: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| teacher.matvec(x).expect("teacher is o×d"))
        .collect();
    let labels = targets.iter().map(|y| argmax(y)).collect();
    let ds = Dataset::new(inputs, targets, Some(labels))?;
    if n >= 2 {
        ds.certify_phi(phi)
    } else {
        Ok(ds)
    }
}

fn random_unit_vector(d: usize, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
