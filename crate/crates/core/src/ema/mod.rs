//! Parameter averaging: classical and power-law EMA, response profiles,
//! `sigma_rel`, and post-hoc reconstruction from stored snapshots.

mod reconstruct;
mod store;
mod sweep;

pub use reconstruct::{solve_profile_weights, Reconstruction};
pub use store::{SnapshotRecord, SnapshotStore, TraceId, INDEX_FILE};
pub use sweep::{ema_sweep, write_sweep_csv, SweepMetrics, SweepRow, SWEEP_HEADER};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two tracked power-law exponents.
pub const DEFAULT_GAMMAS: [f64; 2] = [16.97, 6.94];

/// Largest exponent considered when inverting `sigma_rel`.
const GAMMA_MAX: f64 = 1e7;

/// `(1 - 1/i)^(gamma + 1)`.
pub fn powerlaw_beta(i: u64, gamma: f64) -> Result<f64> {
    if i == 0 {
        return Err(Error::Domain {
            what: "EMA step",
            value: 0.0,
            domain: "i >= 1",
        });
    }
    Ok((1.0 - 1.0 / i as f64).powf(gamma + 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaKind {
    PowerLaw { gamma: f64 },
    /// Constant momentum; the first step copies the parameters.
    Fixed { beta: f64 },
}

impl EmaKind {
    pub fn beta(&self, i: u64) -> Result<f64> {
        match *self {
            EmaKind::PowerLaw { gamma } => powerlaw_beta(i, gamma),
            EmaKind::Fixed { .. } if i == 1 => Ok(0.0),
            EmaKind::Fixed { beta } => Ok(beta),
        }
    }

    /// Weight of each of the steps `1..=n` in the average after step `n`.
    pub fn profile(&self, n: usize) -> Profile {
        match *self {
            EmaKind::PowerLaw { gamma } => response_profile(n, gamma),
            EmaKind::Fixed { beta } => {
                let weights = (1..=n)
                    .map(|j| {
                        let decay = beta.powi((n - j) as i32);
                        if j == 1 {
                            decay
                        } else {
                            (1.0 - beta) * decay
                        }
                    })
                    .collect();
                Profile { weights }
            }
        }
    }
}

/// A running average over a flat parameter vector, kept in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTrace {
    pub kind: EmaKind,
    pub step: u64,
    pub value: Vec<f64>,
}

impl EmaTrace {
    pub fn new(kind: EmaKind, len: usize) -> Self {
        EmaTrace {
            kind,
            step: 0,
            value: vec![0.0; len],
        }
    }

    pub fn powerlaw(gamma: f64, len: usize) -> Self {
        Self::new(EmaKind::PowerLaw { gamma }, len)
    }

    pub fn update(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.value.len() {
            return Err(Error::Shape {
                expected: vec![self.value.len()],
                got: vec![theta.len()],
            });
        }
        let beta = self.kind.beta(self.step + 1)?;
        for (a, &p) in self.value.iter_mut().zip(theta) {
            *a = beta * *a + (1.0 - beta) * p;
        }
        self.step += 1;
        Ok(())
    }
}

/// Nonnegative weights over steps `1..=n`, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub weights: Vec<f64>,
}

impl Profile {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Standard deviation of the step index under the profile, divided by the
    /// profile length.
    pub fn sigma_rel(&self) -> f64 {
        let n = self.weights.len() as f64;
        let total: f64 = self.weights.iter().sum();
        let mean = self.weights.iter().enumerate().map(|(j, w)| (j + 1) as f64 * w).sum::<f64>() / total;
        let var = self
            .weights
            .iter()
            .enumerate()
            .map(|(j, w)| w * ((j + 1) as f64 - mean).powi(2))
            .sum::<f64>()
            / total;
        var.sqrt() / n
    }

    /// Zero-padded to `n` steps.
    pub fn padded(&self, n: usize) -> Vec<f64> {
        let mut w = self.weights.clone();
        w.resize(n.max(w.len()), 0.0);
        w
    }
}

/// `w_j = (1 - ((j-1)/j)^(gamma+1)) (j/n)^(gamma+1)`.
pub fn response_profile(n: usize, gamma: f64) -> Profile {
    let e = gamma + 1.0;
    let weights = (1..=n)
        .map(|j| {
            let j = j as f64;
            (1.0 - ((j - 1.0) / j).powf(e)) * (j / n as f64).powf(e)
        })
        .collect();
    Profile { weights }
}

pub fn sigma_rel(n: usize, gamma: f64) -> f64 {
    response_profile(n, gamma).sigma_rel()
}

/// Achievable `sigma_rel` interval of power-law profiles over `n` steps.
pub fn sigma_rel_range(n: usize) -> (f64, f64) {
    (sigma_rel(n, GAMMA_MAX), sigma_rel(n, 0.0))
}

/// Inverts [`sigma_rel`] by bisection on `gamma`.
pub fn gamma_from_sigma_rel(target: f64, n: usize) -> Result<f64> {
    let (min, max) = sigma_rel_range(n);
    if !(target >= min && target <= max) {
        return Err(Error::Range { target, min, max });
    }
    // bracket on a log scale first, then bisect linearly
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while sigma_rel(n, hi) > target && hi < GAMMA_MAX {
        lo = hi;
        hi = (hi * 2.0).min(GAMMA_MAX);
    }
    while hi - lo > 1e-6 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if sigma_rel(n, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Runs the recursion on a scalar trajectory.
    fn simulate(kind: EmaKind, traj: &[f64]) -> f64 {
        let mut tr = EmaTrace::new(kind, 1);
        for &v in traj {
            tr.update(&[v]).unwrap();
        }
        tr.value[0]
    }

    /// Profile by brute-force unrolling: (1 - beta_j) prod_{m>j} beta_m.
    fn unrolled(kind: EmaKind, n: usize) -> Vec<f64> {
        (1..=n as u64)
            .map(|j| {
                let mut w = 1.0 - kind.beta(j).unwrap();
                for m in j + 1..=n as u64 {
                    w *= kind.beta(m).unwrap();
                }
                w
            })
            .collect()
    }

    #[test]
    fn beta_examples() {
        assert_eq!(powerlaw_beta(1, 16.97).unwrap(), 0.0);
        assert_eq!(powerlaw_beta(2, 7.0).unwrap(), 0.00390625);
        assert!((powerlaw_beta(10, 0.0).unwrap() - 0.9).abs() < 1e-15);
        assert!(powerlaw_beta(0, 1.0).is_err());
    }

    #[test]
    fn trace_examples() {
        for gamma in DEFAULT_GAMMAS {
            let k = EmaKind::PowerLaw { gamma };
            assert_eq!(simulate(k, &[2.5; 37]), 2.5);
            assert_eq!(simulate(k, &[-1.25]), -1.25);
        }
        let v = simulate(EmaKind::PowerLaw { gamma: 0.0 }, &[1.0, 2.0, 3.0, 4.0]);
        let p = response_profile(4, 0.0);
        let want: f64 = p.weights.iter().enumerate().map(|(j, w)| w * (j + 1) as f64).sum();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 2.5).abs() < 1e-12);
        let mut t = EmaTrace::powerlaw(1.0, 2);
        assert!(t.update(&[1.0]).is_err());
    }

    #[test]
    fn profile_examples() {
        assert_eq!(response_profile(1, 5.0).weights, vec![1.0]);
        for w in response_profile(3, 0.0).weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn profiles_match_unrolled_recursion() {
        let kinds = [
            EmaKind::PowerLaw { gamma: 16.97 },
            EmaKind::PowerLaw { gamma: 6.94 },
            EmaKind::PowerLaw { gamma: 0.0 },
            EmaKind::Fixed { beta: 0.95 },
        ];
        for kind in kinds {
            for n in [1, 2, 7, 64, 300] {
                let p = kind.profile(n);
                let u = unrolled(kind, n);
                for (a, b) in p.weights.iter().zip(&u) {
                    assert!((a - b).abs() < 1e-12, "{kind:?} n={n}");
                }
                assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn recursion_matches_profile_on_trajectories() {
        let traj: Vec<f64> = (1..=500).map(|i| (i as f64 / 17.0).sin() * 3.0 + i as f64 * 1e-3).collect();
        for kind in [EmaKind::PowerLaw { gamma: 16.97 }, EmaKind::PowerLaw { gamma: 6.94 }, EmaKind::Fixed { beta: 0.99 }] {
            let seq = simulate(kind, &traj);
            let p = kind.profile(traj.len());
            let direct: f64 = p.weights.iter().zip(&traj).map(|(w, v)| w * v).sum();
            assert!((seq - direct).abs() < 1e-12, "{kind:?}: {seq} vs {direct}");
        }
    }

    #[test]
    fn uniform_profile_sigma_rel() {
        let s = sigma_rel(100_000, 0.0);
        assert!((s - (1.0f64 / 12.0).sqrt()).abs() < 1e-4, "{s}");
    }

    #[test]
    fn sigma_rel_decreases_in_gamma() {
        let n = 1024;
        let grid: Vec<f64> = (0..60).map(|i| 0.25 * i as f64 * (1.0 + 0.1 * i as f64)).collect();
        for w in grid.windows(2) {
            assert!(sigma_rel(n, w[1]) < sigma_rel(n, w[0]), "gamma {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn out_of_range_sigma_rel_reports_interval() {
        match gamma_from_sigma_rel(0.5, 1024) {
            Err(Error::Range { min, max, .. }) => {
                assert!((0.0..1e-3).contains(&min));
                assert!((max - sigma_rel(1024, 0.0)).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn sigma_rel_round_trip(s in 0.001f64..0.28, n in 512usize..4096) {
            let g = gamma_from_sigma_rel(s, n).unwrap();
            prop_assert!((sigma_rel(n, g) - s).abs() < 1e-5);
        }

        #[test]
        fn profiles_are_distributions(n in 1usize..2000, gamma in 0.0f64..200.0) {
            let p = response_profile(n, gamma);
            prop_assert!(p.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}
