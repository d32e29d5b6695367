//! Held-out evaluation of a trained denoiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::{EvalConfig, RunConfig};
use crate::ema::SweepMetrics;
use crate::error::Result;
use crate::mpnet::DenoiserNet;
use crate::precond::{precondition, SignalStats};
use crate::sampler::{enhance_waveforms, pad_frames, Denoiser, NetDenoiser};
use crate::signal::{compress, si_sdr, to_channels, Stft, SynthConfig, Waveform};
use crate::tensor::Tensor;
use crate::trainer::spectral_loss;

/// Times at which the held-out denoising loss is averaged.
pub const LOSS_TIMES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Fixed clean/noisy mixtures at a single SNR.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub clean: Vec<Waveform>,
    pub noisy: Vec<Waveform>,
}

impl EvalSet {
    pub fn new(data: &SynthConfig, eval: &EvalConfig) -> Self {
        let cfg = SynthConfig {
            len: eval.len,
            snr_db: [eval.snr_db; 2],
            ..data.clone()
        };
        let (clean, noisy) = (0..eval.items as u64).map(|i| cfg.item(eval.seed, i)).unzip();
        EvalSet { clean, noisy }
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub si_sdr_noisy: f64,
    pub si_sdr_enhanced: f64,
    pub improvement: f64,
    pub loss: f64,
}

impl From<EvalReport> for SweepMetrics {
    fn from(r: EvalReport) -> Self {
        SweepMetrics {
            si_sdr: r.si_sdr_enhanced,
            loss: r.loss,
        }
    }
}

fn mean_si_sdr(refs: &[Waveform], ests: &[Waveform]) -> Result<f64> {
    let mut total = 0.0;
    for (r, e) in refs.iter().zip(ests) {
        total += si_sdr(&r.samples, &e.samples)?;
    }
    Ok(total / refs.len().max(1) as f64)
}

/// Mean SI-SDR of the noisy inputs and of the enhanced outputs, and the
/// lambda-weighted denoising loss averaged over [`LOSS_TIMES`] with a
/// noise draw fixed by the eval seed.
pub fn evaluate(net: &DenoiserNet<f32>, cfg: &RunConfig, stats: SignalStats, set: &EvalSet) -> Result<EvalReport> {
    let stft = Stft::new(cfg.stft)?;
    let den = NetDenoiser {
        net,
        schedule: cfg.schedule,
        stats,
        mode: cfg.train.skip_mode,
    };
    let rows = cfg.net.freq_bins;
    let multiple = cfg.net.downsample_factor();
    let enhanced = enhance_waveforms(&set.noisy, &den, rows, multiple, &stft, &cfg.schedule, &cfg.sampler)?;
    let si_sdr_noisy = mean_si_sdr(&set.clean, &set.noisy)?;
    let si_sdr_enhanced = mean_si_sdr(&set.clean, &enhanced)?;

    let chans = |waves: &[Waveform]| -> Result<Tensor<f64>> {
        let items = waves
            .iter()
            .map(|w| Ok(pad_frames(&to_channels(&compress(&stft.forward(&w.samples)?), rows)?, multiple)))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    };
    let x0 = chans(&set.clean)?;
    let y = chans(&set.noisy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let mut loss = 0.0;
    for &t in &LOSS_TIMES {
        let z = Tensor::from_vec(x0.dims(), (0..x0.len()).map(|_| StandardNormal.sample(&mut rng)).collect())?;
        let x_t = cfg.schedule.sample_marginal(&x0, &y, t, &z)?;
        let d = den.denoise(&x_t, &y, t)?;
        let lambda = precondition(&cfg.schedule, &stats, cfg.train.skip_mode, t)?.lambda;
        loss += spectral_loss(&d, &x0, &vec![lambda; set.len()])?;
    }
    Ok(EvalReport {
        si_sdr_noisy,
        si_sdr_enhanced,
        improvement: si_sdr_enhanced - si_sdr_noisy,
        loss: loss / LOSS_TIMES.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_set_is_deterministic_and_at_the_requested_snr() {
        let cfg = RunConfig::default();
        let eval = EvalConfig {
            items: 3,
            ..cfg.eval.clone()
        };
        let a = EvalSet::new(&cfg.data, &eval);
        let b = EvalSet::new(&cfg.data, &eval);
        assert_eq!(a.len(), 3);
        for i in 0..3 {
            assert_eq!(a.noisy[i].samples, b.noisy[i].samples);
            assert_eq!(a.clean[i].len(), eval.len);
            let noise: f64 = a.noisy[i].samples.iter().zip(&a.clean[i].samples).map(|(y, x)| (y - x).powi(2)).sum();
            let snr = 10.0 * (a.clean[i].energy() / noise).log10();
            assert!((snr - eval.snr_db).abs() < 0.01, "{snr}");
        }
    }

    #[test]
    fn fresh_network_passes_the_noisy_input_through() {
        // out_gain = 0 makes F = 0, so clean prediction returns zero and
        // the sampler lands on w_y(t_eps) y plus the untouched Nyquist row.
        let mut cfg = RunConfig::default();
        cfg.eval = EvalConfig {
            items: 2,
            len: 1024,
            ..cfg.eval
        };
        cfg.sampler.n_steps = 4;
        let net = DenoiserNet::<f32>::new(cfg.net.clone()).unwrap();
        let set = EvalSet::new(&cfg.data, &cfg.eval);
        let r = evaluate(&net, &cfg, SignalStats::new(0.006, 0.008).unwrap(), &set).unwrap();
        assert!(r.si_sdr_noisy.is_finite() && r.si_sdr_enhanced.is_finite() && r.loss.is_finite());
        assert!((r.improvement - (r.si_sdr_enhanced - r.si_sdr_noisy)).abs() < 1e-12);
        // With F = 0 the loss is lambda ||x0||^2 = ||x0||^2 / c_out^2 per item.
        assert!(r.loss > 0.0);
    }
}
