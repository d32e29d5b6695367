//! Drift-free Schrödinger-bridge schedule with exponential diffusion
//! coefficient `g(t) = sqrt(c) * k^t`.
//!
//! Everything here is closed form. The accumulated variances are
//!
//! ```text
//! var_fwd(t) = ∫_0^t g(τ)² dτ = c (k^{2t} - 1) / (2 ln k)
//! var_bwd(t) = ∫_t^1 g(τ)² dτ = c (k^2 - k^{2t}) / (2 ln k)
//! ```
//!
//! and the bridge marginal conditioned on `(x0, y)` is Gaussian with mean
//! `w_x x0 + w_y y` and variance `var_fwd var_bwd / (var_fwd + var_bwd)`.
//! Time is always `f64`, independent of the tensor precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeSchedule {
    pub c: f64,
    pub k: f64,
    pub t_eps: f64,
}

impl Default for BridgeSchedule {
    fn default() -> Self {
        BridgeSchedule {
            c: 0.4,
            k: 2.6,
            t_eps: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleCoefficients {
    pub t: f64,
    pub g: f64,
    pub var_fwd: f64,
    pub var_bwd: f64,
    pub var_marg: f64,
    pub w_x: f64,
    pub w_y: f64,
}

impl ScheduleCoefficients {
    pub fn sigma(&self) -> f64 {
        self.var_marg.sqrt()
    }
}

impl BridgeSchedule {
    pub fn new(c: f64, k: f64, t_eps: f64) -> Result<Self> {
        let s = BridgeSchedule { c, k, t_eps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::config("schedule.c", format!("must be > 0, got {}", self.c)));
        }
        if !(self.k > 1.0 && self.k.is_finite()) {
            return Err(Error::config("schedule.k", format!("must be > 1, got {}", self.k)));
        }
        if !(self.t_eps > 0.0 && self.t_eps < 1.0) {
            return Err(Error::config(
                "schedule.t_eps",
                format!("must lie in (0, 1), got {}", self.t_eps),
            ));
        }
        Ok(())
    }

    pub fn g(&self, t: f64) -> f64 {
        self.c.sqrt() * self.k.powf(t)
    }

    fn half_rate(&self) -> f64 {
        self.c / (2.0 * self.k.ln())
    }

    /// Variance accumulated over `[0, t]`.
    pub fn var_fwd(&self, t: f64) -> f64 {
        self.half_rate() * (self.k.powf(2.0 * t) - 1.0)
    }

    /// Variance accumulated over `[t, 1]`. Computed directly rather than as
    /// `total - var_fwd` so it stays accurate close to `t = 1`.
    pub fn var_bwd(&self, t: f64) -> f64 {
        self.half_rate() * (self.k * self.k - self.k.powf(2.0 * t))
    }

    pub fn var_total(&self) -> f64 {
        self.var_fwd(1.0)
    }

    pub fn coefficients(&self, t: f64) -> Result<ScheduleCoefficients> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain {
                what: "t",
                value: t,
                domain: "[0, 1]",
            });
        }
        let var_fwd = self.var_fwd(t);
        let var_bwd = self.var_bwd(t);
        let total = self.var_total();
        let w_y = var_fwd / total;
        Ok(ScheduleCoefficients {
            t,
            g: self.g(t),
            var_fwd,
            var_bwd,
            var_marg: var_fwd * var_bwd / total,
            w_x: 1.0 - w_y,
            w_y,
        })
    }

    /// Draws `x_t = w_x x0 + w_y y + sigma_t z` for a given standard-normal `z`.
    pub fn sample_marginal<S: Scalar>(
        &self,
        x0: &Tensor<S>,
        y: &Tensor<S>,
        t: f64,
        z: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        x0.ensure_same_shape(y)?;
        x0.ensure_same_shape(z)?;
        let co = self.coefficients(t)?;
        let (wx, wy, sd) = (S::lit(co.w_x), S::lit(co.w_y), S::lit(co.sigma()));
        let data = x0
            .data()
            .iter()
            .zip(y.data())
            .zip(z.data())
            .map(|((&a, &b), &n)| wx * a + wy * b + sd * n)
            .collect();
        Tensor::from_vec(x0.dims(), data)
    }

    /// Conditional mean `w_x(t) x0 + w_y(t) y`.
    pub fn marginal_mean<S: Scalar>(&self, x0: &Tensor<S>, y: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
        let co = self.coefficients(t)?;
        let (wx, wy) = (S::lit(co.w_x), S::lit(co.w_y));
        x0.zip_map(y, |a, b| wx * a + wy * b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Adaptive Simpson quadrature of `g(τ)²`; independent of the closed form.
    fn quad_var_fwd(s: &BridgeSchedule, t: f64) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn adapt(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (l, r) = (simpson(f, a, m), simpson(f, m, b));
            if depth == 0 || (l + r - whole).abs() <= 15.0 * tol {
                l + r + (l + r - whole) / 15.0
            } else {
                adapt(f, a, m, l, tol / 2.0, depth - 1) + adapt(f, m, b, r, tol / 2.0, depth - 1)
            }
        }
        let f = |tau: f64| s.g(tau).powi(2);
        adapt(&f, 0.0, t, simpson(&f, 0.0, t), 1e-14, 40)
    }

    #[test]
    fn boundaries_are_exact() {
        let s = BridgeSchedule::default();
        let c0 = s.coefficients(0.0).unwrap();
        assert_eq!((c0.var_fwd, c0.w_x, c0.w_y, c0.var_marg), (0.0, 1.0, 0.0, 0.0));
        let c1 = s.coefficients(1.0).unwrap();
        assert_eq!((c1.w_x, c1.w_y, c1.var_marg), (0.0, 1.0, 0.0));
        assert_relative_eq!(c1.var_fwd, 1.2056, max_relative = 1e-4);
        assert_relative_eq!(c1.var_fwd, quad_var_fwd(&s, 1.0), max_relative = 1e-10);
    }

    #[test]
    fn midpoint_matches_quadrature_oracle() {
        let s = BridgeSchedule::default();
        let co = s.coefficients(0.5).unwrap();
        let fwd = quad_var_fwd(&s, 0.5);
        let bwd = quad_var_fwd(&s, 1.0) - fwd;
        assert_relative_eq!(co.var_fwd, fwd, max_relative = 1e-10);
        assert_relative_eq!(co.var_bwd, bwd, max_relative = 1e-10);
        assert_relative_eq!(co.w_x, bwd / (fwd + bwd), max_relative = 1e-10);
        assert_relative_eq!(co.var_marg, fwd * bwd / (fwd + bwd), max_relative = 1e-10);
        // frozen values from the quadrature oracle
        assert!((co.var_fwd - 0.3349).abs() < 1e-4);
        assert!((co.var_bwd - 0.8707).abs() < 1e-4);
        assert!((co.w_x - 0.7222).abs() < 1e-4);
        assert!((co.w_y - 0.2778).abs() < 1e-4);
        assert!((co.var_marg - 0.2419).abs() < 1e-4);
    }

    #[test]
    fn rejects_out_of_range_time() {
        let s = BridgeSchedule::default();
        assert!(matches!(s.coefficients(-0.01), Err(Error::Domain { .. })));
        assert!(matches!(s.coefficients(1.5), Err(Error::Domain { .. })));
        assert!(s.coefficients(f64::NAN).is_err());
    }

    #[test]
    fn rejects_bad_constants() {
        assert!(BridgeSchedule::new(0.0, 2.6, 0.02).is_err());
        assert!(BridgeSchedule::new(0.4, 1.0, 0.02).is_err());
        assert!(BridgeSchedule::new(0.4, 2.6, 1.0).is_err());
    }

    #[test]
    fn sample_marginal_examples() {
        let s = BridgeSchedule::default();
        let x0 = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = Tensor::<f64>::from_vec(&[3], vec![4.0, 0.0, -1.0]).unwrap();
        let z = Tensor::<f64>::from_vec(&[3], vec![0.3, 1.7, -0.9]).unwrap();
        assert_eq!(s.sample_marginal(&x0, &y, 0.0, &z).unwrap(), x0);
        assert_eq!(s.sample_marginal(&x0, &y, 1.0, &z).unwrap(), y);

        let one = |v: f64| Tensor::<f64>::from_vec(&[1], vec![v]).unwrap();
        let xt = s.sample_marginal(&one(1.0), &one(2.0), 0.5, &one(1.0)).unwrap();
        assert!((xt.data()[0] - 1.7696).abs() < 1e-4);

        let bad = Tensor::<f64>::zeros(&[2]);
        assert!(s.sample_marginal(&x0, &bad, 0.5, &z).is_err());
    }

    #[test]
    fn dense_grid_identities() {
        let s = BridgeSchedule::default();
        let total = s.var_total();
        for i in 0..=1000 {
            let t = s.t_eps + (1.0 - s.t_eps) * i as f64 / 1000.0;
            let co = s.coefficients(t).unwrap();
            assert_eq!(co.w_x + co.w_y, 1.0);
            assert_relative_eq!(co.var_fwd + co.var_bwd, total, max_relative = 1e-12);
        }
    }

    #[test]
    fn w_y_strictly_increasing() {
        let s = BridgeSchedule::default();
        let mut prev = -1.0;
        for i in 0..=500 {
            let w = s.coefficients(i as f64 / 500.0).unwrap().w_y;
            assert!(w > prev);
            prev = w;
        }
    }

    proptest! {
        #[test]
        fn closed_form_matches_quadrature(t in 0.0f64..=1.0, c in 0.05f64..2.0, k in 1.1f64..5.0) {
            let s = BridgeSchedule::new(c, k, 0.02).unwrap();
            let exact = s.var_fwd(t);
            let numeric = quad_var_fwd(&s, t);
            prop_assert!((exact - numeric).abs() <= 1e-8 * numeric.abs().max(1e-300));
        }

        #[test]
        fn marginal_variance_formula(t in 0.0f64..=1.0) {
            let s = BridgeSchedule::default();
            let co = s.coefficients(t).unwrap();
            prop_assert!(co.var_marg >= 0.0 && co.var_fwd >= 0.0 && co.var_bwd >= 0.0);
            let expect = co.var_fwd * co.var_bwd / (co.var_fwd + co.var_bwd);
            prop_assert!((co.var_marg - expect).abs() <= 1e-14);
        }
    }
}
