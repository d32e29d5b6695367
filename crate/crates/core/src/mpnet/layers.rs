//! Tensor-level magnitude-preserving primitives, outside of any tape.

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

use super::tape::sigmoid;

/// Default `eps` of the forward-pass weight normalization.
pub const WEIGHT_NORM_EPS: f64 = 1e-4;

/// `v / (||v||_2 + eps)` for a single weight vector.
pub fn normalize_weight<S: Scalar>(v: &[S], eps: S) -> Vec<S> {
    let norm = v.iter().map(|&a| a * a).sum::<S>().sqrt();
    let inv = S::one() / (norm + eps);
    v.iter().map(|&a| a * inv).collect()
}

/// Rescales `v` in place to Euclidean norm `sqrt(fan_in)`. A zero vector has
/// no direction and is left as is.
pub fn force_norm_vector<S: Scalar>(v: &mut [S], fan_in: usize) {
    let norm = v.iter().map(|&a| a.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let scale = S::lit((fan_in as f64).sqrt() / norm);
    v.iter_mut().for_each(|a| *a = *a * scale);
}

/// Magnitude-preserving interpolation with `tau = sigmoid(tau_raw)`.
pub fn mp_add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, tau_raw: f64) -> Result<Tensor<S>> {
    mp_add_tau(a, b, sigmoid(tau_raw))
}

/// [`mp_add`] with `tau` given directly.
pub fn mp_add_tau<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, tau: f64) -> Result<Tensor<S>> {
    let r = ((1.0 - tau).powi(2) + tau * tau).sqrt();
    let (wa, wb) = (S::lit((1.0 - tau) / r), S::lit(tau / r));
    a.zip_map(b, |p, q| wa * p + wb * q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn normalize_examples() {
        let v = normalize_weight(&[3.0f64, 4.0], 0.0);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(normalize_weight(&[0.0f64, 0.0], 1e-4), vec![0.0, 0.0]);
        assert_eq!(normalize_weight(&[1.0f64; 4], 0.0), vec![0.5; 4]);
    }

    #[test]
    fn force_norm_examples() {
        let mut v = [3.0f64, 4.0];
        force_norm_vector(&mut v, 2);
        assert!((v[0] - 0.8485).abs() < 1e-4 && (v[1] - 1.1314).abs() < 1e-4);
        assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - 2f64.sqrt()).abs() < 1e-15);
        let before = v;
        force_norm_vector(&mut v, 2);
        for (a, b) in v.iter().zip(before) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut z = [0.0f64; 2];
        force_norm_vector(&mut z, 2);
        assert_eq!(z, [0.0, 0.0]);
    }

    #[test]
    fn mp_add_examples() {
        let a = Tensor::<f64>::from_vec(&[2], vec![1.0, -3.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2], vec![2.0, 5.0]).unwrap();
        let mid = mp_add(&a, &b, 0.0).unwrap();
        let s2 = 2f64.sqrt();
        assert!((mid.data()[0] - 3.0 / s2).abs() < 1e-15);
        assert!((mid.data()[1] - 2.0 / s2).abs() < 1e-15);
        let low = mp_add(&a, &b, -40.0).unwrap();
        for (x, y) in low.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(mp_add(&a, &Tensor::zeros(&[3]), 0.0).is_err());
    }

    #[test]
    fn mp_add_preserves_unit_variance() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for tau in [0.1, 0.5, 0.9] {
            let draw = |rng: &mut ChaCha8Rng| {
                Tensor::<f64>::from_vec(&[n], (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
            };
            let (a, b) = (draw(&mut rng), draw(&mut rng));
            let out = mp_add_tau(&a, &b, tau).unwrap();
            let mean = out.data().iter().sum::<f64>() / n as f64;
            let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "tau {tau}: var {var}");
        }
    }
}
