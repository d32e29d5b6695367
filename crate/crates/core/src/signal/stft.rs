//! Centered STFT with a periodic Hann window and weighted overlap-add inverse.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { win_len: 128, hop: 32 }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.win_len < 4 || self.win_len % 2 != 0 {
            return Err(Error::config("stft.win_len", format!("must be even and >= 4, got {}", self.win_len)));
        }
        if self.hop == 0 || self.win_len % self.hop != 0 || self.hop > self.win_len / 2 {
            return Err(Error::config(
                "stft.hop",
                format!("must divide win_len = {} and be at most half of it, got {}", self.win_len, self.hop),
            ));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.win_len / 2 + 1
    }

    /// Frame count for a signal of `len` samples (frames centered on multiples of `hop`).
    pub fn frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.win_len as f64;
        (0..self.win_len)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect()
    }
}

/// One-sided complex spectrogram, row-major `[bins, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        Spectrogram {
            bins,
            frames,
            data: vec![Complex64::new(0.0, 0.0); bins * frames],
        }
    }

    pub fn at(&self, f: usize, t: usize) -> Complex64 {
        self.data[f * self.frames + t]
    }

    pub fn at_mut(&mut self, f: usize, t: usize) -> &mut Complex64 {
        &mut self.data[f * self.frames + t]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Reusable FFT plans and window for one [`StftConfig`].
#[derive(Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Stft {
            window: cfg.window(),
            fwd: planner.plan_fft_forward(cfg.win_len),
            inv: planner.plan_fft_inverse(cfg.win_len),
            cfg,
        })
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    fn frame_start(&self, j: usize) -> isize {
        (j * self.cfg.hop) as isize - (self.cfg.win_len / 2) as isize
    }

    pub fn forward(&self, wav: &[f64]) -> Result<Spectrogram> {
        let n = self.cfg.win_len;
        if wav.len() < n {
            return Err(Error::Shape {
                expected: vec![n],
                got: vec![wav.len()],
            });
        }
        let frames = self.cfg.frames(wav.len());
        let bins = self.cfg.bins();
        let mut spec = Spectrogram::zeros(bins, frames);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..frames {
            let start = self.frame_start(j);
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let v = if idx >= 0 && (idx as usize) < wav.len() {
                    wav[idx as usize]
                } else {
                    0.0
                };
                *b = Complex64::new(v * self.window[i], 0.0);
            }
            self.fwd.process(&mut buf);
            for f in 0..bins {
                *spec.at_mut(f, j) = buf[f];
            }
        }
        Ok(spec)
    }

    /// Sum of squared windows covering each output sample.
    fn window_energy(&self, len: usize, frames: usize) -> Vec<f64> {
        let mut den = vec![0.0; len];
        for j in 0..frames {
            let start = self.frame_start(j);
            for (i, w) in self.window.iter().enumerate() {
                let idx = start + i as isize;
                if idx >= 0 && (idx as usize) < len {
                    den[idx as usize] += w * w;
                }
            }
        }
        den
    }

    fn check_spec(&self, spec: &Spectrogram, len: usize) -> Result<()> {
        if spec.bins != self.cfg.bins() || spec.frames != self.cfg.frames(len) {
            return Err(Error::Shape {
                expected: vec![self.cfg.bins(), self.cfg.frames(len)],
                got: vec![spec.bins, spec.frames],
            });
        }
        Ok(())
    }

    /// Inverse transform back to exactly `len` samples.
    pub fn inverse(&self, spec: &Spectrogram, len: usize) -> Result<Vec<f64>> {
        self.check_spec(spec, len)?;
        let n = self.cfg.win_len;
        let den = self.window_energy(len, spec.frames);
        let mut out = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..spec.frames {
            self.hermitian_fill(spec, j, &mut buf);
            self.inv.process(&mut buf);
            let start = self.frame_start(j);
            for (i, b) in buf.iter().enumerate() {
                let idx = start + i as isize;
                if idx >= 0 && (idx as usize) < len {
                    out[idx as usize] += b.re / n as f64 * self.window[i];
                }
            }
        }
        for (o, d) in out.iter_mut().zip(&den) {
            *o /= d;
        }
        Ok(out)
    }

    /// Adjoint of [`Stft::inverse`] with respect to the real and imaginary
    /// parts of the spectrogram: maps a gradient on the waveform to the
    /// gradient on each coefficient (stored as `re + i im`).
    pub fn inverse_adjoint(&self, grad: &[f64], frames: usize) -> Result<Spectrogram> {
        let len = grad.len();
        if frames != self.cfg.frames(len) {
            return Err(Error::Shape {
                expected: vec![self.cfg.frames(len)],
                got: vec![frames],
            });
        }
        let n = self.cfg.win_len;
        let den = self.window_energy(len, frames);
        let bins = self.cfg.bins();
        let mut spec = Spectrogram::zeros(bins, frames);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..frames {
            let start = self.frame_start(j);
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let v = if idx >= 0 && (idx as usize) < len {
                    grad[idx as usize] / den[idx as usize] * self.window[i]
                } else {
                    0.0
                };
                *b = Complex64::new(v, 0.0);
            }
            self.fwd.process(&mut buf);
            for f in 0..bins {
                let c = if f == 0 || f == n / 2 { 1.0 } else { 2.0 };
                let mut v = buf[f] * (c / n as f64);
                if f == 0 || f == n / 2 {
                    // imaginary parts of these rows never reach the waveform
                    v.im = 0.0;
                }
                *spec.at_mut(f, j) = v;
            }
        }
        Ok(spec)
    }

    fn hermitian_fill(&self, spec: &Spectrogram, j: usize, buf: &mut [Complex64]) {
        let n = self.cfg.win_len;
        for f in 0..spec.bins {
            buf[f] = spec.at(f, j);
        }
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        for f in 1..n / 2 {
            buf[n - f] = buf[f].conj();
        }
    }
}
