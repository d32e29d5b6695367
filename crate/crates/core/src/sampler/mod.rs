//! Deterministic reverse-time bridge sampler and waveform enhancement.
//!
//! Each step evaluates the denoiser at `t` and moves to `s < t` along the
//! Gaussian bridge family: the conditional mean at `s` plus the current
//! residual around the mean at `t`, shrunk by `sigma_s / sigma_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpnet::DenoiserNet;
use crate::precond::{precondition, SignalStats, SkipMode};
use crate::schedule::BridgeSchedule;
use crate::signal::{compress, decompress, from_channels, to_channels, Stft, Waveform};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { n_steps: 50 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("sampler.n_steps", "must be >= 1"));
        }
        Ok(())
    }

    /// `n_steps + 1` uniformly spaced times from 1 down to `t_eps`.
    pub fn grid(&self, t_eps: f64) -> Vec<f64> {
        let n = self.n_steps;
        let h = (1.0 - t_eps) / n as f64;
        let mut g: Vec<f64> = (0..=n).map(|i| 1.0 - i as f64 * h).collect();
        g[n] = t_eps;
        g
    }
}

/// Estimate of `x0` from `(x_t, y, t)`.
pub trait Denoiser {
    fn denoise(&self, x_t: &Tensor<f64>, y: &Tensor<f64>, t: f64) -> Result<Tensor<f64>>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor<f64>, &Tensor<f64>, f64) -> Result<Tensor<f64>>,
{
    fn denoise(&self, x_t: &Tensor<f64>, y: &Tensor<f64>, t: f64) -> Result<Tensor<f64>> {
        self(x_t, y, t)
    }
}

/// `x_s = mu_s(x0_hat, y) + (sigma_s / sigma_t)(x_t - mu_t(x0_hat, y))`,
/// given the denoiser estimate `x0_hat` at `t`. The residual term is zero
/// when `sigma_t = 0`.
pub fn bridge_update(
    sched: &BridgeSchedule,
    x_t: &Tensor<f64>,
    y: &Tensor<f64>,
    x0_hat: &Tensor<f64>,
    t: f64,
    s: f64,
) -> Result<Tensor<f64>> {
    if !(s < t) {
        return Err(Error::Order { t, s });
    }
    let (ct, cs) = (sched.coefficients(t)?, sched.coefficients(s)?);
    let r = if ct.sigma() > 0.0 { cs.sigma() / ct.sigma() } else { 0.0 };
    x_t.ensure_same_shape(y)?;
    x_t.ensure_same_shape(x0_hat)?;
    let data = x_t
        .data()
        .iter()
        .zip(y.data())
        .zip(x0_hat.data())
        .map(|((&x, &yv), &d)| {
            let resid = x - ct.w_x * d - ct.w_y * yv;
            cs.w_x * d + cs.w_y * yv + if r == 0.0 { 0.0 } else { r * resid }
        })
        .collect();
    Tensor::from_vec(x_t.dims(), data)
}

/// One sampler step from `t` to `s`; returns `x_s`.
pub fn ode_step<D: Denoiser + ?Sized>(
    sched: &BridgeSchedule,
    x_t: &Tensor<f64>,
    y: &Tensor<f64>,
    t: f64,
    s: f64,
    den: &D,
) -> Result<Tensor<f64>> {
    if !(s < t) {
        return Err(Error::Order { t, s });
    }
    let x0_hat = den.denoise(x_t, y, t)?;
    bridge_update(sched, x_t, y, &x0_hat, t, s)
}

/// Runs the sampler from `x_1 = y` down to `t_eps` and returns the
/// denoiser estimate there.
pub fn enhance_spec<D: Denoiser + ?Sized>(sched: &BridgeSchedule, y: &Tensor<f64>, den: &D, cfg: &SamplerConfig) -> Result<Tensor<f64>> {
    cfg.validate()?;
    let grid = cfg.grid(sched.t_eps);
    let mut x = y.clone();
    for (i, w) in grid.windows(2).enumerate() {
        x = ode_step(sched, &x, y, w[0], w[1], den)?;
        if !x.is_finite() {
            return Err(Error::NonFinite {
                context: format!("sampler step {i} (t = {} -> {})", w[0], w[1]),
            });
        }
    }
    let out = den.denoise(&x, y, sched.t_eps)?;
    if !out.is_finite() {
        return Err(Error::NonFinite {
            context: format!("final denoiser output at t = {}", sched.t_eps),
        });
    }
    Ok(out)
}

/// Posterior mean `E[x0 | x_t, y]` when `x0 ~ N(0, var_x)` and
/// `y = x0 + n`, `n ~ N(0, var_n)`, element-wise independent. Variances
/// are given per element, or as a single value for all elements.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub schedule: BridgeSchedule,
    pub var_x: Vec<f64>,
    pub var_n: Vec<f64>,
}

impl GaussianOracle {
    pub fn scalar(schedule: BridgeSchedule, var_x: f64, var_n: f64) -> Self {
        GaussianOracle {
            schedule,
            var_x: vec![var_x],
            var_n: vec![var_n],
        }
    }

    fn at(v: &[f64], i: usize) -> f64 {
        if v.len() == 1 {
            v[0]
        } else {
            v[i]
        }
    }
}

impl Denoiser for GaussianOracle {
    fn denoise(&self, x_t: &Tensor<f64>, y: &Tensor<f64>, t: f64) -> Result<Tensor<f64>> {
        x_t.ensure_same_shape(y)?;
        for v in [&self.var_x, &self.var_n] {
            if v.len() != 1 && v.len() != x_t.len() {
                return Err(Error::Shape {
                    expected: vec![x_t.len()],
                    got: vec![v.len()],
                });
            }
        }
        let co = self.schedule.coefficients(t)?;
        let data = x_t
            .data()
            .iter()
            .zip(y.data())
            .enumerate()
            .map(|(i, (&x, &yv))| {
                let (vx, vn) = (Self::at(&self.var_x, i), Self::at(&self.var_n, i));
                // x0 | y ~ N(k y, v); x_t | x0, y ~ N(w_x x0 + w_y y, sigma_t^2)
                let k = vx / (vx + vn);
                let v = vx * vn / (vx + vn);
                let mean = k * yv;
                let innov = x - co.w_x * mean - co.w_y * yv;
                let denom = co.w_x * co.w_x * v + co.var_marg;
                if denom > 0.0 {
                    mean + co.w_x * v / denom * innov
                } else {
                    mean
                }
            })
            .collect();
        Tensor::from_vec(x_t.dims(), data)
    }
}

/// The trained network wrapped in its preconditioning. Accepts `[2, F, T]`
/// or `[N, 2, F, T]` inputs with `T` divisible by the downsampling factor.
#[derive(Clone, Copy, Debug)]
pub struct NetDenoiser<'a> {
    pub net: &'a DenoiserNet<f32>,
    pub schedule: BridgeSchedule,
    pub stats: SignalStats,
    pub mode: SkipMode,
}

impl Denoiser for NetDenoiser<'_> {
    fn denoise(&self, x_t: &Tensor<f64>, y: &Tensor<f64>, t: f64) -> Result<Tensor<f64>> {
        x_t.ensure_same_shape(y)?;
        let single = x_t.dims().len() == 3;
        let dims4 = if single {
            [&[1][..], x_t.dims()].concat()
        } else {
            x_t.dims().to_vec()
        };
        let pre = precondition(&self.schedule, &self.stats, self.mode, t)?;
        let x_in: Tensor<f32> = x_t.scale(pre.c_in).cast().reshape(&dims4)?;
        let cond: Tensor<f32> = y.scale(pre.c_cond).cast().reshape(&dims4)?;
        let f = self.net.eval(&x_in, &cond, &vec![t; dims4[0]])?;
        let f: Tensor<f64> = f.cast().reshape(x_t.dims())?;
        x_t.zip_map(&f, |x, fv| pre.c_skip * x + pre.c_out * fv)
    }
}

/// Compressed-STFT enhancement of equally long waveforms, batched.
///
/// Frequency rows the network does not cover pass through from the
/// noisy input; frames are zero-padded to the network's granularity and
/// cropped afterwards.
pub fn enhance_waveforms<D: Denoiser + ?Sized>(
    inputs: &[Waveform],
    den: &D,
    rows: usize,
    frame_multiple: usize,
    stft: &Stft,
    sched: &BridgeSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<Waveform>> {
    let Some(first) = inputs.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    if let Some(w) = inputs.iter().find(|w| w.len() != len) {
        return Err(Error::Shape {
            expected: vec![len],
            got: vec![w.len()],
        });
    }
    let mut specs = Vec::with_capacity(inputs.len());
    let mut chans = Vec::with_capacity(inputs.len());
    for w in inputs {
        let spec = compress(&stft.forward(&w.samples)?);
        chans.push(pad_frames(&to_channels::<f64>(&spec, rows)?, frame_multiple));
        specs.push(spec);
    }
    let y = Tensor::stack(&chans)?;
    let x = enhance_spec(sched, &y, den, cfg)?;
    let frames = specs[0].frames;
    x.unstack()
        .iter()
        .zip(&specs)
        .zip(inputs)
        .map(|((item, spec), w)| {
            let cropped = crop_frames(item, frames);
            let out = from_channels(&cropped, spec)?;
            let samples = stft.inverse(&decompress(&out), len)?;
            Waveform::new(samples, w.sample_rate)
        })
        .collect()
}

/// Zero-pads the last axis of a `[C, F, T]` tensor to a multiple of `m`.
pub fn pad_frames(t: &Tensor<f64>, m: usize) -> Tensor<f64> {
    let d = t.dims();
    let (c, f, frames) = (d[0], d[1], d[2]);
    let padded = frames.div_ceil(m) * m;
    if padded == frames {
        return t.clone();
    }
    let mut out = Tensor::zeros(&[c, f, padded]);
    for (src, dst) in t.data().chunks(frames).zip(out.data_mut().chunks_mut(padded)) {
        dst[..frames].copy_from_slice(src);
    }
    out
}

/// Keeps the first `frames` entries of the last axis of a `[C, F, T]` tensor.
pub fn crop_frames(t: &Tensor<f64>, frames: usize) -> Tensor<f64> {
    let d = t.dims();
    let data = t.data().chunks(d[2]).flat_map(|row| row[..frames].iter().copied()).collect();
    Tensor::from_vec(&[d[0], d[1], frames], data).expect("crop keeps a consistent length")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn grid_is_uniform() {
        let s = BridgeSchedule::default();
        let g = SamplerConfig::default().grid(s.t_eps);
        assert_eq!(g.len(), 51);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[50], 0.02);
        for w in g.windows(2) {
            assert!((w[0] - w[1] - 0.0196).abs() < 1e-12);
        }
        assert!(SamplerConfig { n_steps: 0 }.validate().is_err());
    }

    #[test]
    fn rejects_wrong_order() {
        let s = BridgeSchedule::default();
        let den = |x: &Tensor<f64>, _: &Tensor<f64>, _: f64| Ok(x.clone());
        let x = scalar(1.0);
        assert!(matches!(ode_step(&s, &x, &x, 0.5, 0.5, &den), Err(Error::Order { .. })));
        assert!(matches!(ode_step(&s, &x, &x, 0.4, 0.5, &den), Err(Error::Order { .. })));
    }

    #[test]
    fn on_mean_stays_on_mean() {
        let s = BridgeSchedule::default();
        let (x0, y) = (scalar(0.7), scalar(-1.1));
        let den = |_: &Tensor<f64>, _: &Tensor<f64>, _: f64| Ok(scalar(0.7));
        let x_t = s.marginal_mean(&x0, &y, 0.8).unwrap();
        let x_s = ode_step(&s, &x_t, &y, 0.8, 0.3, &den).unwrap();
        let want = s.marginal_mean(&x0, &y, 0.3).unwrap();
        assert!((x_s.data()[0] - want.data()[0]).abs() < 1e-15);
        // from t = 1 the state is y itself and sigma_1 = 0
        let x_s = ode_step(&s, &y, &y, 1.0, 0.5, &den).unwrap();
        assert!((x_s.data()[0] - s.marginal_mean(&x0, &y, 0.5).unwrap().data()[0]).abs() < 1e-15);
    }

    #[test]
    fn constant_denoiser_is_step_count_independent() {
        let s = BridgeSchedule::default();
        let y = Tensor::from_vec(&[3], vec![0.3, -2.0, 1.0]).unwrap();
        let target = Tensor::from_vec(&[3], vec![1.5, 0.25, -0.5]).unwrap();
        let den = |_: &Tensor<f64>, _: &Tensor<f64>, _: f64| Ok(target.clone());
        let one = enhance_spec(&s, &y, &den, &SamplerConfig { n_steps: 1 }).unwrap();
        let fifty = enhance_spec(&s, &y, &den, &SamplerConfig { n_steps: 50 }).unwrap();
        assert_eq!(one, target);
        assert_eq!(fifty, target);
    }

    #[test]
    fn gaussian_oracle_is_exact() {
        let s = BridgeSchedule::default();
        let (vx, vn) = (0.402, 0.342);
        let oracle = GaussianOracle::scalar(s, vx, vn);
        for yv in [-1.3, 0.0, 0.4, 2.2] {
            let y = scalar(yv);
            for n in [1, 10, 50, 100] {
                let out = enhance_spec(&s, &y, &oracle, &SamplerConfig { n_steps: n }).unwrap();
                assert!((out.data()[0] - vx / (vx + vn) * yv).abs() < 1e-10, "n {n}");
            }
        }
        // no noise: the posterior mean is y itself
        let clean = GaussianOracle::scalar(s, 0.5, 1e-300);
        let out = enhance_spec(&s, &scalar(0.8), &clean, &SamplerConfig::default()).unwrap();
        assert!((out.data()[0] - 0.8).abs() < 1e-10);
    }

    #[test]
    fn gaussian_oracle_diagonal_tensor() {
        let s = BridgeSchedule::default();
        let var_x = vec![0.1, 0.5, 2.0, 0.02];
        let var_n = vec![0.3, 0.05, 1.0, 0.5];
        let oracle = GaussianOracle {
            schedule: s,
            var_x: var_x.clone(),
            var_n: var_n.clone(),
        };
        let y = Tensor::from_vec(&[2, 2], vec![0.5, -1.0, 3.0, 0.1]).unwrap();
        let out = enhance_spec(&s, &y, &oracle, &SamplerConfig { n_steps: 7 }).unwrap();
        for i in 0..4 {
            let want = var_x[i] / (var_x[i] + var_n[i]) * y.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn pad_and_crop_round_trip() {
        let t = Tensor::from_vec(&[1, 2, 3], (0..6).map(f64::from).collect()).unwrap();
        let p = pad_frames(&t, 4);
        assert_eq!(p.dims(), &[1, 2, 4]);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 0.0, 3.0, 4.0, 5.0, 0.0]);
        assert_eq!(crop_frames(&p, 3), t);
    }
}
