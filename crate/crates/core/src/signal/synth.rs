//! Synthetic voiced-like signals in low-pass noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{compress, Stft, StftConfig, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub sample_rate: u32,
    /// Samples per item.
    pub len: usize,
    /// Corpus items draw their SNR uniformly from this range (dB).
    pub snr_db: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_rate: 8000,
            len: 992,
            snr_db: [0.0, 10.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate < 1000 {
            return Err(Error::config("data.sample_rate", "must be at least 1000 Hz"));
        }
        if self.len == 0 {
            return Err(Error::config("data.len", "must be positive"));
        }
        let [lo, hi] = self.snr_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::config("data.snr_db", format!("need finite lo <= hi, got [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Item `index` of the corpus rooted at `seed`: `(clean, noisy)`.
    pub fn item(&self, seed: u64, index: u64) -> (Waveform, Waveform) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let [lo, hi] = self.snr_db;
        let snr = if lo == hi { lo } else { rng.random_range(lo..hi) };
        render(&mut rng, snr, self)
    }
}

/// A harmonic tone under a slow envelope, mixed with low-pass noise at
/// `snr_db`, both peak-normalized by the mixture. Deterministic per seed.
pub fn synth_pair(seed: u64, snr_db: f64, cfg: &SynthConfig) -> (Waveform, Waveform) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render(&mut rng, snr_db, cfg)
}

fn render(rng: &mut ChaCha8Rng, snr_db: f64, cfg: &SynthConfig) -> (Waveform, Waveform) {
    let fs = cfg.sample_rate as f64;
    let f0: f64 = rng.random_range(80.0..300.0);
    let harmonics: Vec<(f64, f64, f64)> = (1..=rng.random_range(3..=6usize))
        .map(|h| {
            let amp = rng.random_range(0.3..1.0) / h as f64;
            (h as f64 * f0, amp, rng.random_range(0.0..2.0 * PI))
        })
        .filter(|&(f, _, _)| f < 0.45 * fs)
        .collect();
    let env_f: f64 = rng.random_range(2.0..6.0);
    let env_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let clean: Vec<f64> = (0..cfg.len)
        .map(|i| {
            let t = i as f64 / fs;
            let env = 0.55 + 0.45 * (2.0 * PI * env_f * t + env_phase).sin();
            env * harmonics
                .iter()
                .map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                .sum::<f64>()
        })
        .collect();

    let cutoff: f64 = rng.random_range(500.0..2500.0);
    let a = (-2.0 * PI * cutoff / fs).exp();
    let mut state = 0.0;
    let noise: Vec<f64> = (0..cfg.len)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            state = a * state + (1.0 - a) * w;
            state
        })
        .collect();

    let ec: f64 = clean.iter().map(|v| v * v).sum();
    let en: f64 = noise.iter().map(|v| v * v).sum();
    let gain = if en > 0.0 {
        (ec / (en * 10f64.powf(snr_db / 10.0))).sqrt()
    } else {
        0.0
    };
    let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(c, n)| c + gain * n).collect();
    let peak = noisy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let wave = |v: Vec<f64>| Waveform {
        samples: v.into_iter().map(|s| s * norm).collect(),
        sample_rate: cfg.sample_rate,
    };
    (wave(clean), wave(noisy))
}

/// Per-coefficient second moments of compressed clean spectra and of the
/// compressed-domain noise `c(Y) - c(X)`, pooled over items, bins, frames
/// and the real/imaginary channels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sigma_x2: f64,
    pub sigma_n2: f64,
    pub items: usize,
}

pub fn corpus_stats(synth: &SynthConfig, stft: StftConfig, items: usize, seed: u64) -> Result<CorpusStats> {
    let tf = Stft::new(stft)?;
    let (mut sx, mut sn, mut count) = (0.0, 0.0, 0usize);
    for i in 0..items {
        let (clean, noisy) = synth.item(seed, i as u64);
        let x = compress(&tf.forward(&clean.samples)?);
        let y = compress(&tf.forward(&noisy.samples)?);
        for (a, b) in x.data.iter().zip(&y.data) {
            sx += a.norm_sqr();
            sn += (b - a).norm_sqr();
        }
        count += 2 * x.data.len();
    }
    if count == 0 {
        return Err(Error::config("stats.items", "must be positive"));
    }
    Ok(CorpusStats {
        sigma_x2: sx / count as f64,
        sigma_n2: sn / count as f64,
        items,
    })
}
