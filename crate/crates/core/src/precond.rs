//! Time-dependent preconditioning of the denoiser.
//!
//! The network `F` sees `c_in(t) x_t` and `c_cond y` and predicts the
//! normalized target `(x0 - c_skip x_t) / c_out(t)`. Under the mixture model
//! `y = x0 + n` with independent zero-mean `x0` (variance `sigma_x2`) and `n`
//! (variance `sigma_n2`), both the network input and its target have unit
//! variance at every `t`, and `lambda(t) = 1 / c_out(t)^2` makes the effective
//! loss weight one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{BridgeSchedule, ScheduleCoefficients};
use crate::tensor::{Scalar, Tensor};

/// Per-coefficient variances of compressed clean and noise spectra.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalStats {
    pub sigma_x2: f64,
    pub sigma_n2: f64,
}

impl Default for SignalStats {
    /// VoiceBank-DEMAND values, used when no corpus statistics are supplied.
    fn default() -> Self {
        SignalStats {
            sigma_x2: 0.402,
            sigma_n2: 0.342,
        }
    }
}

impl SignalStats {
    pub fn new(sigma_x2: f64, sigma_n2: f64) -> Result<Self> {
        let s = SignalStats { sigma_x2, sigma_n2 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("stats.sigma_x2", self.sigma_x2), ("stats.sigma_n2", self.sigma_n2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// `c_skip = 1`: the network predicts the (scaled) noise.
    NoisePrediction,
    /// `c_skip = 0`: the network predicts the (scaled) clean signal.
    CleanPrediction,
}

impl SkipMode {
    pub fn c_skip(self) -> f64 {
        match self {
            SkipMode::NoisePrediction => 1.0,
            SkipMode::CleanPrediction => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreconditionSet {
    pub t: f64,
    pub c_in: f64,
    pub c_cond: f64,
    pub c_out: f64,
    pub c_skip: f64,
    pub lambda: f64,
}

impl PreconditionSet {
    /// `lambda * c_out^2`, identically one.
    pub fn effective_weight(&self) -> f64 {
        self.lambda * self.c_out * self.c_out
    }
}

/// `1 / c_in(t)^2`: variance of `x_t` under the mixture model.
fn input_variance(co: &ScheduleCoefficients, stats: &SignalStats) -> f64 {
    let w = co.w_x + co.w_y;
    w * w * stats.sigma_x2 + co.w_y * co.w_y * stats.sigma_n2 + co.var_marg
}

/// General output-scaling expression, valid for any `c_skip`.
pub fn c_out_squared(co: &ScheduleCoefficients, stats: &SignalStats, c_skip: f64) -> f64 {
    let a = 1.0 - c_skip * (co.w_x + co.w_y);
    a * a * stats.sigma_x2
        + c_skip * c_skip * co.w_y * co.w_y * stats.sigma_n2
        + c_skip * c_skip * co.var_marg
}

pub fn precondition(
    sched: &BridgeSchedule,
    stats: &SignalStats,
    mode: SkipMode,
    t: f64,
) -> Result<PreconditionSet> {
    stats.validate()?;
    let co = sched.coefficients(t)?;
    let c_in = 1.0 / input_variance(&co, stats).sqrt();
    let c_cond = 1.0 / input_variance(&sched.coefficients(1.0)?, stats).sqrt();
    let c_skip = mode.c_skip();
    let c_out = match mode {
        SkipMode::CleanPrediction => stats.sigma_x2.sqrt(),
        SkipMode::NoisePrediction => c_out_squared(&co, stats, c_skip).sqrt(),
    };
    if !(c_out > 0.0) {
        // noise prediction at t = 0: x_t = x0, nothing left to predict
        return Err(Error::Domain {
            what: "t",
            value: t,
            domain: "(0, 1] for noise prediction",
        });
    }
    Ok(PreconditionSet {
        t,
        c_in,
        c_cond,
        c_out,
        c_skip,
        lambda: 1.0 / (c_out * c_out),
    })
}

/// `D(x_t, y, t) = c_skip x_t + c_out F(c_in x_t, c_cond y, t)`.
pub fn denoise<S, F>(net: F, x_t: &Tensor<S>, y: &Tensor<S>, t: f64, pre: &PreconditionSet) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnOnce(&Tensor<S>, &Tensor<S>, f64) -> Result<Tensor<S>>,
{
    x_t.ensure_same_shape(y)?;
    let x_in = x_t.scale(S::lit(pre.c_in));
    let cond = y.scale(S::lit(pre.c_cond));
    let out = net(&x_in, &cond, t)?;
    x_t.ensure_same_shape(&out)?;
    let (skip, c_out) = (S::lit(pre.c_skip), S::lit(pre.c_out));
    x_t.zip_map(&out, |x, f| skip * x + c_out * f)
}

/// Normalized network target `(x0 - c_skip x_t) / c_out`.
pub fn f_target<S: Scalar>(x0: &Tensor<S>, x_t: &Tensor<S>, pre: &PreconditionSet) -> Result<Tensor<S>> {
    let (skip, inv) = (S::lit(pre.c_skip), S::lit(1.0 / pre.c_out));
    x0.zip_map(x_t, |a, x| (a - skip * x) * inv)
}
