//! Least-squares fit of a target EMA profile by stored snapshot profiles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative Tikhonov damping added to the Gram diagonal.
const DAMPING: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    /// One coefficient per basis profile.
    pub coefficients: Vec<f64>,
    /// `||sum_s a_s p_s - p_target||_2`.
    pub residual: f64,
    /// The damped Gram matrix was not positive definite and the
    /// minimum-norm solution was used instead.
    pub rank_deficient: bool,
}

/// Minimizes `||sum_s a_s basis[s] - target||_2` over `a`.
pub fn solve_profile_weights(basis: &[Vec<f64>], target: &[f64]) -> Result<Reconstruction> {
    if basis.is_empty() {
        return Err(Error::Store("no snapshot profiles to combine".into()));
    }
    let n = target.len();
    if let Some(b) = basis.iter().find(|b| b.len() != n) {
        return Err(Error::Shape {
            expected: vec![n],
            got: vec![b.len()],
        });
    }
    let a = DMatrix::from_fn(n, basis.len(), |i, s| basis[s][i]);
    let b = DVector::from_column_slice(target);

    let mut gram = a.transpose() * &a;
    let scale = gram.diagonal().max();
    for i in 0..gram.nrows() {
        gram[(i, i)] += DAMPING * scale;
    }
    let rhs = a.transpose() * &b;
    let (x, rank_deficient) = match gram.cholesky() {
        Some(ch) => (ch.solve(&rhs), false),
        None => {
            log::warn!("snapshot profile system is rank deficient; using the minimum-norm solution");
            let svd = a.clone().svd(true, true);
            let x = svd
                .solve(&b, 1e-12 * svd.singular_values.max())
                .map_err(|e| Error::Store(e.to_string()))?;
            (x, true)
        }
    };
    let residual = (&a * &x - &b).norm();
    Ok(Reconstruction {
        coefficients: x.iter().copied().collect(),
        residual,
        rank_deficient,
    })
}
