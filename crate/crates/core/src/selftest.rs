//! Invariant suite behind the `selftest` command.
//!
//! Every check measures one number and compares it with a fixed limit, so
//! callers can print a table or assert on the measured values directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

use crate::ema::{gamma_from_sigma_rel, response_profile, solve_profile_weights, EmaTrace, DEFAULT_GAMMAS};
use crate::error::{Error, Result};
use crate::mpnet::{grad_check, mp_add_tau, DenoiserNet, NetConfig, ParamSet, Tape};
use crate::precond::{f_target, precondition, SignalStats, SkipMode};
use crate::sampler::{enhance_spec, GaussianOracle, SamplerConfig};
use crate::schedule::BridgeSchedule;
use crate::signal::{compress, decompress, si_sdr, Spectrogram, Stft, StftConfig, SynthConfig};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, TrainSetup, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub limit: f64,
    /// `value >= limit` is required instead of `value <= limit`.
    pub lower_bound: bool,
    pub passed: bool,
}

impl Check {
    /// Passes when `value <= limit`. Errors and NaN fail.
    fn at_most(name: &'static str, value: Result<f64>, limit: f64) -> Check {
        let value = value.unwrap_or_else(|e| {
            log::error!("{name}: {e}");
            f64::NAN
        });
        Check {
            name,
            value,
            limit,
            lower_bound: false,
            passed: value <= limit,
        }
    }

    fn at_least(name: &'static str, value: Result<f64>, limit: f64) -> Check {
        let c = Check::at_most(name, value, limit);
        Check {
            lower_bound: true,
            passed: c.value >= limit,
            ..c
        }
    }

    pub fn relation(&self) -> &'static str {
        if self.lower_bound {
            ">="
        } else {
            "<="
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub const MONTE_CARLO_DRAWS: usize = 100_000;

/// Runs every group. Checks that depend on a broken schedule fail rather
/// than abort the run.
pub fn run_all(sched: &BridgeSchedule, stats: &SignalStats) -> Vec<Check> {
    let mut out = schedule_checks(sched);
    out.extend(precond_checks(sched, stats, MONTE_CARLO_DRAWS));
    out.extend(sampler_checks(sched, stats));
    out.extend(gradient_checks(sched, stats));
    out.extend(magnitude_checks(sched, stats));
    out.extend(ema_checks());
    out.extend(signal_checks());
    out
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

pub fn schedule_checks(sched: &BridgeSchedule) -> Vec<Check> {
    let valid = sched.validate().map(|_| 0.0);
    let quad = || -> Result<f64> {
        sched.validate()?;
        let g2 = |tau: f64| sched.g(tau).powi(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let t: f64 = rng.random_range(0.0..1.0);
            let fwd = adaptive_simpson(&g2, 0.0, t, 1e-15);
            let bwd = adaptive_simpson(&g2, t, 1.0, 1e-15);
            let co = sched.coefficients(t)?;
            worst = worst
                .max(((co.var_fwd - fwd) / fwd.max(f64::MIN_POSITIVE)).abs())
                .max(((co.var_bwd - bwd) / bwd.max(f64::MIN_POSITIVE)).abs());
        }
        Ok(worst)
    };
    let bounds = || -> Result<f64> {
        sched.validate()?;
        let (c0, c1) = (sched.coefficients(0.0)?, sched.coefficients(1.0)?);
        let devs = [c0.w_x - 1.0, c1.w_y - 1.0, c0.var_marg, c1.var_marg];
        Ok(devs.iter().map(|d| d.abs()).fold(0.0, f64::max))
    };
    vec![
        Check::at_most("schedule: constants valid", valid, 0.0),
        Check::at_most("schedule: closed-form variance vs quadrature (rel)", quad(), 1e-8),
        Check::at_most("schedule: boundary identities", bounds(), 0.0),
    ]
}

/// Largest `|Var - 1| / SE` over 20 times and both skip modes, for the
/// network input `c_in x_t` and the training target.
pub fn precond_z_scores(sched: &BridgeSchedule, stats: &SignalStats, draws: usize) -> Result<(f64, f64)> {
    sched.validate()?;
    stats.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (sx, sn) = (stats.sigma_x2.sqrt(), stats.sigma_n2.sqrt());
    let (mut z_in, mut z_out): (f64, f64) = (0.0, 0.0);
    for k in 0..20 {
        let t = sched.t_eps + (1.0 - sched.t_eps) * k as f64 / 19.0;
        let mut draw = |scale: f64| -> Tensor<f64> {
            let v = (0..draws).map(|_| scale * gauss(&mut rng)).collect();
            Tensor::from_vec(&[draws], v).expect("length")
        };
        let x0 = draw(sx);
        let n = draw(sn);
        let z = draw(1.0);
        let y = x0.zip_map(&n, |a, b| a + b)?;
        let x_t = sched.sample_marginal(&x0, &y, t, &z)?;
        for mode in [SkipMode::CleanPrediction, SkipMode::NoisePrediction] {
            let pre = precondition(sched, stats, mode, t)?;
            z_in = z_in.max(variance_z_score(&x_t.scale(pre.c_in)));
            z_out = z_out.max(variance_z_score(&f_target(&x0, &x_t, &pre)?));
        }
    }
    Ok((z_in, z_out))
}

/// `|mean(u^2) - 1| / SE` for zero-mean `u`, with the standard error from
/// the sample fourth moment.
fn variance_z_score(u: &Tensor<f64>) -> f64 {
    let n = u.len() as f64;
    let m2 = u.data().iter().map(|v| v * v).sum::<f64>() / n;
    let m4 = u.data().iter().map(|v| v.powi(4)).sum::<f64>() / n;
    let (dev, se) = ((m2 - 1.0).abs(), ((m4 - m2 * m2) / n).sqrt());
    if dev == 0.0 {
        0.0
    } else {
        dev / se
    }
}

pub fn precond_checks(sched: &BridgeSchedule, stats: &SignalStats, draws: usize) -> Vec<Check> {
    let z = precond_z_scores(sched, stats, draws);
    let (z_in, z_out) = match z {
        Ok((a, b)) => (Ok(a), Ok(b)),
        Err(e) => (Err(Error::Store(e.to_string())), Err(e)),
    };
    let weight = || -> Result<f64> {
        let mut worst: f64 = 0.0;
        for k in 0..=100 {
            let t = sched.t_eps + (1.0 - sched.t_eps) * k as f64 / 100.0;
            for mode in [SkipMode::CleanPrediction, SkipMode::NoisePrediction] {
                worst = worst.max((precondition(sched, stats, mode, t)?.effective_weight() - 1.0).abs());
            }
        }
        Ok(worst)
    };
    vec![
        Check::at_most("precond: Var(c_in x_t) = 1 (max z-score)", z_in, 3.0),
        Check::at_most("precond: Var(target) = 1 (max z-score)", z_out, 3.0),
        Check::at_most("precond: lambda c_out^2 = 1", weight(), 1e-12),
    ]
}

/// Max abs deviation of the sampler, driven by the exact posterior mean,
/// from the Wiener gain applied to `y`, over the given step counts.
pub fn gaussian_sampler_error(sched: &BridgeSchedule, stats: &SignalStats, steps: &[usize]) -> Result<f64> {
    let oracle = GaussianOracle::scalar(*sched, stats.sigma_x2, stats.sigma_n2);
    let gain = stats.sigma_x2 / (stats.sigma_x2 + stats.sigma_n2);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let y = Tensor::from_vec(&[2, 8, 8], (0..128).map(|_| 2.0 * gauss(&mut rng)).collect::<Vec<f64>>())?;
    let mut worst: f64 = 0.0;
    for &n_steps in steps {
        let out = enhance_spec(sched, &y, &oracle, &SamplerConfig { n_steps })?;
        for (o, v) in out.data().iter().zip(y.data()) {
            worst = worst.max((o - gain * v).abs());
        }
    }
    Ok(worst)
}

pub fn sampler_checks(sched: &BridgeSchedule, stats: &SignalStats) -> Vec<Check> {
    vec![Check::at_most(
        "sampler: Gaussian oracle reproduces the Wiener gain",
        gaussian_sampler_error(sched, stats, &[1, 10, 50]),
        1e-10,
    )]
}

/// Small network used by the gradient and training checks.
pub fn tiny_net_config() -> NetConfig {
    NetConfig {
        channels: vec![4, 8],
        blocks_per_level: 1,
        emb_dim: 8,
        freq_bins: 8,
        ..NetConfig::default()
    }
}

/// Reverse mode vs central differences in double precision, on a
/// preconditioned spectral loss with a nonzero output gain.
pub fn network_grad_check(sched: &BridgeSchedule, stats: &SignalStats, coords: usize) -> Result<(usize, f64)> {
    let mut net = DenoiserNet::<f64>::new(tiny_net_config())?;
    let g = net.out_gain_index();
    net.params_mut().get_mut(g).value = Tensor::scalar(0.8);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let dims = [2, 2, 8, 8];
    let mut randn = || {
        let v: Vec<f64> = (0..256).map(|_| gauss(&mut rng)).collect();
        Tensor::from_vec(&dims, v).expect("length")
    };
    let (x0, y, z) = (randn(), randn(), randn());
    let ts = [0.3, 0.8];
    let mode = SkipMode::CleanPrediction;
    let mut x_t = Vec::new();
    let mut pre = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let item = |a: &Tensor<f64>| Tensor::from_vec(&dims[1..], a.item(i).to_vec());
        x_t.push(sched.sample_marginal(&item(&x0)?, &item(&y)?, t, &item(&z)?)?);
        pre.push(precondition(sched, stats, mode, t)?);
    }
    let x_t = Tensor::stack(&x_t)?;
    let mut x_in = x_t.clone();
    for (i, p) in pre.iter().enumerate() {
        x_in.item_mut(i).iter_mut().for_each(|v| *v *= p.c_in);
    }
    let cond = y.scale(pre[0].c_cond);
    let numel = x0.len() as f64;

    let objective = |params: &ParamSet<f64>, want: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut probe = net.clone();
        *probe.params_mut() = params.clone();
        let mut tape = Tape::new();
        let leaves = probe.bind(&mut tape, want);
        let xin = tape.constant(x_in.clone());
        let (f, _) = probe.forward(&mut tape, &leaves, xin, &cond, &ts)?;
        let skip = x_t.scale(mode.c_skip());
        let d = tape.scale_shift(f, pre.iter().map(|p| p.c_out).collect(), &skip)?;
        let w = pre.iter().map(|p| p.lambda / numel).collect();
        let loss = tape.weighted_sse(d, x0.clone(), w)?;
        let value = tape.value(loss).data()[0];
        if !want {
            return Ok((value, None));
        }
        let mut grads = tape.backward(loss);
        let out = leaves
            .iter()
            .zip(params.iter())
            .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.value.dims())))
            .collect();
        Ok((value, Some(out)))
    };
    let report = grad_check(net.params(), objective, coords, 1e-5, 1e-6, 43)?;
    if let Some((name, j, a, n)) = &report.worst {
        log::debug!("worst gradient coordinate {name}[{j}]: analytic {a:e}, numeric {n:e}");
    }
    Ok((report.coords_checked, report.max_rel_error))
}

pub fn gradient_checks(sched: &BridgeSchedule, stats: &SignalStats) -> Vec<Check> {
    let r = network_grad_check(sched, stats, 240);
    let coords = r.as_ref().map(|&(c, _)| c as f64).map_err(|e| Error::Store(e.to_string()));
    vec![
        Check::at_least("gradients: coordinates checked", coords, 200.0),
        Check::at_most("gradients: max relative error vs finite differences", r.map(|(_, e)| e), 1e-4),
    ]
}

/// Largest weight-norm deviation seen after each of `steps` optimizer
/// steps on the tiny network.
pub fn post_step_norm_deviation(sched: &BridgeSchedule, stats: &SignalStats, steps: u64) -> Result<f64> {
    let setup = TrainSetup {
        train: TrainConfig {
            batch_size: 2,
            total_steps: steps,
            lr0: 0.05,
            ..TrainConfig::default()
        },
        schedule: *sched,
        stats: *stats,
        stft: StftConfig::default(),
        data: SynthConfig::default(),
        net: tiny_net_config(),
    };
    let mut trainer = Trainer::new(setup)?;
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        let batch = trainer.batch()?;
        trainer.train_step(&batch)?;
        worst = worst.max(trainer.net().params().max_norm_deviation());
    }
    Ok(worst)
}

/// Largest `|Var(mp_add(a, b)) - 1| / SE` for independent unit Gaussians.
pub fn mp_add_z_score(taus: &[f64], draws: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut worst: f64 = 0.0;
    for &tau in taus {
        let mut draw = || Tensor::from_vec(&[draws], (0..draws).map(|_| gauss(&mut rng)).collect::<Vec<f64>>());
        let (a, b) = (draw()?, draw()?);
        worst = worst.max(variance_z_score(&mp_add_tau(&a, &b, tau)?));
    }
    Ok(worst)
}

pub fn magnitude_checks(sched: &BridgeSchedule, stats: &SignalStats) -> Vec<Check> {
    vec![
        Check::at_most("mp: weight norms after every step (rel)", post_step_norm_deviation(sched, stats, 4), 1e-6),
        Check::at_most(
            "mp: mp_add output variance (max z-score)",
            mp_add_z_score(&[0.1, 0.5, 0.9], MONTE_CARLO_DRAWS),
            3.0,
        ),
    ]
}

fn trajectory(n: usize) -> Vec<f64> {
    (1..=n).map(|i| (i as f64 / 40.0).sin() + i as f64 / 500.0).collect()
}

/// Sequential power-law EMA vs the closed-form profile applied to the whole
/// history, at every step, relative to `max(1, |value|)`.
pub fn ema_sequential_error(n: usize) -> Result<f64> {
    let traj = trajectory(n);
    let mut worst: f64 = 0.0;
    for g in DEFAULT_GAMMAS {
        let mut tr = EmaTrace::powerlaw(g, 1);
        for (i, &v) in traj.iter().enumerate() {
            tr.update(&[v])?;
            let exact: f64 = response_profile(i + 1, g).weights.iter().zip(&traj).map(|(w, v)| w * v).sum();
            worst = worst.max((tr.value[0] - exact).abs() / exact.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Snapshots of both default traces every `n / snapshots` steps.
fn snapshot_basis(traj: &[f64], snapshots: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = traj.len();
    let every = n / snapshots;
    let (mut basis, mut values) = (Vec::new(), Vec::new());
    for g in DEFAULT_GAMMAS {
        let mut tr = EmaTrace::powerlaw(g, 1);
        for (i, &v) in traj.iter().enumerate() {
            tr.update(&[v])?;
            if (i + 1) % every == 0 {
                basis.push(response_profile(i + 1, g).padded(n));
                values.push(tr.value[0]);
            }
        }
    }
    Ok((basis, values))
}

/// Relative error of the post-hoc estimate at `sigma_rel` against the
/// exact full-history EMA of the synthetic trajectory.
pub fn ema_reconstruction_error(n: usize, snapshots: usize, sigma_rel: f64) -> Result<f64> {
    let traj = trajectory(n);
    let (basis, values) = snapshot_basis(&traj, snapshots)?;
    let target = response_profile(n, gamma_from_sigma_rel(sigma_rel, n)?);
    let exact: f64 = target.weights.iter().zip(&traj).map(|(w, v)| w * v).sum();
    let r = solve_profile_weights(&basis, &target.weights)?;
    let approx: f64 = r.coefficients.iter().zip(&values).map(|(a, v)| a * v).sum();
    Ok(((approx - exact) / exact).abs())
}

/// Profile residual when the target is a combination of stored profiles.
pub fn ema_in_span_residual(n: usize, snapshots: usize) -> Result<f64> {
    let (basis, _) = snapshot_basis(&trajectory(n), snapshots)?;
    let (a, b) = (basis.len() / 3, basis.len() - 1);
    let target: Vec<f64> = basis[a].iter().zip(&basis[b]).map(|(p, q)| 0.25 * p + 0.75 * q).collect();
    Ok(solve_profile_weights(&basis, &target)?.residual)
}

pub fn ema_checks() -> Vec<Check> {
    vec![
        Check::at_most("ema: sequential update vs analytic profile", ema_sequential_error(512), 1e-12),
        Check::at_most("ema: post-hoc sigma_rel=0.05 vs exact (rel)", ema_reconstruction_error(1024, 16, 0.05), 1e-2),
        Check::at_most("ema: in-span target recovered exactly", ema_in_span_residual(1024, 16), 1e-10),
    ]
}

pub fn stft_round_trip_error(len: usize) -> Result<f64> {
    let stft = Stft::new(StftConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let x: Vec<f64> = (0..len).map(|_| gauss(&mut rng)).collect();
    let back = stft.inverse(&stft.forward(&x)?, len)?;
    let err: f64 = x.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(err / x.iter().map(|a| a * a).sum::<f64>().sqrt())
}

pub fn compression_round_trip_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let mut spec = Spectrogram::zeros(65, 40);
    for c in &mut spec.data {
        let m: f64 = 10f64.powf(rng.random_range(-6.0..3.0));
        *c = Complex64::from_polar(m, rng.random_range(-3.1..3.1));
    }
    let back = decompress(&compress(&spec));
    spec.data
        .iter()
        .zip(&back.data)
        .map(|(a, b)| (a - b).norm() / a.norm())
        .fold(0.0, f64::max)
}

pub fn si_sdr_scale_deviation() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let r: Vec<f64> = (0..2000).map(|_| gauss(&mut rng)).collect();
    let e: Vec<f64> = r.iter().map(|v| v + 0.3 * gauss(&mut rng)).collect();
    let base = si_sdr(&r, &e)?;
    let mut worst: f64 = 0.0;
    for a in [1e-3, 0.5, 7.0, 1e4] {
        let scaled: Vec<f64> = e.iter().map(|v| a * v).collect();
        worst = worst.max((si_sdr(&r, &scaled)? - base).abs());
    }
    Ok(worst)
}

/// Largest deviation (dB) of the realized SNR of `synth_pair` from the request.
pub fn synth_snr_error() -> Result<f64> {
    let cfg = SynthConfig::default();
    let mut worst: f64 = 0.0;
    for (seed, snr) in [-5.0, 0.0, 2.5, 5.0, 10.0, 20.0].iter().enumerate() {
        for k in 0..4u64 {
            let (clean, noisy) = crate::signal::synth_pair(seed as u64 * 17 + k, *snr, &cfg);
            let noise: f64 = noisy.samples.iter().zip(&clean.samples).map(|(y, x)| (y - x).powi(2)).sum();
            worst = worst.max((10.0 * (clean.energy() / noise).log10() - snr).abs());
        }
    }
    Ok(worst)
}

pub fn signal_checks() -> Vec<Check> {
    vec![
        Check::at_most("signal: STFT round trip (rel)", stft_round_trip_error(4000), 1e-6),
        Check::at_most("signal: compression round trip (rel)", Ok(compression_round_trip_error()), 1e-6),
        Check::at_most("signal: SI-SDR scale invariance (dB)", si_sdr_scale_deviation(), 1e-9),
        Check::at_most("signal: synthesized SNR error (dB)", synth_snr_error(), 0.01),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_exponentials() {
        let v = adaptive_simpson(&|x: f64| (2.0 * x).exp(), 0.0, 1.0, 1e-14);
        assert!((v - ((2.0f64).exp() - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn broken_schedule_fails_by_name() {
        let bad = BridgeSchedule {
            c: -0.4,
            ..BridgeSchedule::default()
        };
        let checks = schedule_checks(&bad);
        assert!(checks.iter().any(|c| !c.passed && c.name.starts_with("schedule")));
    }

    #[test]
    fn variance_z_score_of_exact_unit_sample_is_zero() {
        let u = Tensor::from_vec(&[4], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(variance_z_score(&u), 0.0);
    }
}
