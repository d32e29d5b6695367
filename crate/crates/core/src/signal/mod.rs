//! Waveforms, compressed STFT features, SI-SDR and the synthetic corpus.

mod stft;
mod synth;
mod wav;

pub use stft::{Spectrogram, Stft, StftConfig};
pub use synth::{corpus_stats, synth_pair, CorpusStats, SynthConfig};
pub use wav::{read_wav, read_wav_dir, write_wav, WavFormat};

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const COMPRESS_GAIN: f64 = 0.15;
pub const COMPRESS_EXPONENT: f64 = 0.5;
/// SI-SDR values are clamped to `[-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB]`.
pub const SI_SDR_CLAMP_DB: f64 = 60.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("waveform sample {i}"),
            });
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

/// `0.15 |x|^0.5 e^{i angle(x)}`.
pub fn compress_coef(x: Complex64) -> Complex64 {
    let m = x.norm();
    if m == 0.0 {
        return x;
    }
    x * (COMPRESS_GAIN * m.powf(COMPRESS_EXPONENT) / m)
}

/// Inverse of [`compress_coef`]: magnitude `(m / 0.15)^2`, phase kept.
pub fn decompress_coef(z: Complex64) -> Complex64 {
    let m = z.norm();
    if m == 0.0 {
        return z;
    }
    z * ((m / COMPRESS_GAIN).powf(1.0 / COMPRESS_EXPONENT) / m)
}

pub fn compress(spec: &Spectrogram) -> Spectrogram {
    Spectrogram {
        data: spec.data.iter().map(|&c| compress_coef(c)).collect(),
        ..*spec
    }
}

pub fn decompress(spec: &Spectrogram) -> Spectrogram {
    Spectrogram {
        data: spec.data.iter().map(|&c| decompress_coef(c)).collect(),
        ..*spec
    }
}

/// Vector-Jacobian product of [`decompress_coef`] on `(re, im)`.
///
/// With `x = z |z| / 0.15^2`, the Jacobian is
/// `(|z| I + z z^T / |z|) / 0.0225`, symmetric, so the VJP applies it to `g`.
pub fn decompress_vjp(z: Complex64, g: Complex64) -> Complex64 {
    let m = z.norm();
    if m == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let dot = z.re * g.re + z.im * g.im;
    (g * m + z * (dot / m)) / (COMPRESS_GAIN * COMPRESS_GAIN)
}

/// Real/imaginary channels of the first `rows` frequency rows, dims `[2, rows, frames]`.
pub fn to_channels<S: Scalar>(spec: &Spectrogram, rows: usize) -> Result<Tensor<S>> {
    if rows > spec.bins {
        return Err(Error::Shape {
            expected: vec![spec.bins],
            got: vec![rows],
        });
    }
    let plane = rows * spec.frames;
    let mut data = vec![S::zero(); 2 * plane];
    for (i, c) in spec.data[..plane].iter().enumerate() {
        data[i] = S::lit(c.re);
        data[plane + i] = S::lit(c.im);
    }
    Tensor::from_vec(&[2, rows, spec.frames], data)
}

/// Inverse of [`to_channels`]. Rows beyond the tensor's extent are copied from `fill`.
pub fn from_channels<S: Scalar>(t: &Tensor<S>, fill: &Spectrogram) -> Result<Spectrogram> {
    let d = t.dims();
    if d.len() != 3 || d[0] != 2 || d[1] > fill.bins || d[2] != fill.frames {
        return Err(Error::Shape {
            expected: vec![2, fill.bins, fill.frames],
            got: d.to_vec(),
        });
    }
    let plane = d[1] * d[2];
    let mut out = fill.clone();
    for i in 0..plane {
        out.data[i] = Complex64::new(t.data()[i].as_f64(), t.data()[plane + i].as_f64());
    }
    Ok(out)
}

/// Scale-invariant SDR in dB on mean-centered signals, clamped to +-60 dB.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    si_sdr_with(reference, estimate, true)
}

/// [`si_sdr`] with optional mean removal.
pub fn si_sdr_with(reference: &[f64], estimate: &[f64], center: bool) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape {
            expected: vec![reference.len()],
            got: vec![estimate.len()],
        });
    }
    let mean = |v: &[f64]| {
        if center && !v.is_empty() {
            v.iter().sum::<f64>() / v.len() as f64
        } else {
            0.0
        }
    };
    let (ms, me) = (mean(reference), mean(estimate));
    let s: Vec<f64> = reference.iter().map(|v| v - ms).collect();
    let e: Vec<f64> = estimate.iter().map(|v| v - me).collect();
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if !(ss > 0.0) {
        return Err(Error::Domain {
            what: "reference energy",
            value: ss,
            domain: "(0, inf)",
        });
    }
    let alpha = e.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let target: f64 = alpha * alpha * ss;
    let resid: f64 = e.iter().zip(&s).map(|(a, b)| (alpha * b - a).powi(2)).sum();
    let db = if resid == 0.0 {
        SI_SDR_CLAMP_DB
    } else if target == 0.0 {
        -SI_SDR_CLAMP_DB
    } else {
        10.0 * (target / resid).log10()
    };
    Ok(db.clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compress_examples() {
        let c = compress_coef(Complex64::new(4.0, 0.0));
        assert!((c.re - 0.3).abs() < 1e-15 && c.im == 0.0);
        assert_eq!(compress_coef(Complex64::new(0.0, 0.0)), Complex64::new(0.0, 0.0));
        assert_eq!(decompress_coef(Complex64::new(0.0, 0.0)), Complex64::new(0.0, 0.0));
        let d = decompress_coef(Complex64::new(0.0, -0.3));
        assert!((d.im + 4.0).abs() < 1e-12 && d.re.abs() < 1e-15);
    }

    #[test]
    fn decompress_vjp_matches_differences() {
        let z = Complex64::new(0.31, -0.52);
        let g = Complex64::new(0.7, 1.3);
        let h = 1e-6;
        let f = |z: Complex64| {
            let x = decompress_coef(z);
            x.re * g.re + x.im * g.im
        };
        let dre = (f(z + Complex64::new(h, 0.0)) - f(z - Complex64::new(h, 0.0))) / (2.0 * h);
        let dim = (f(z + Complex64::new(0.0, h)) - f(z - Complex64::new(0.0, h))) / (2.0 * h);
        let v = decompress_vjp(z, g);
        assert!((v.re - dre).abs() < 1e-6 && (v.im - dim).abs() < 1e-6, "{v} vs {dre} {dim}");
    }

    #[test]
    fn si_sdr_examples() {
        let s = [1.0, -2.0, 0.5, 3.0];
        let twice: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&s, &twice).unwrap(), 60.0);
        assert!((si_sdr_with(&[1.0, 0.0], &[1.0, 1.0], false).unwrap()).abs() < 1e-12);
        let orth = [-2.0, -1.0, 3.0, 0.0];
        let o = [1.0, -2.0, 0.0, 1.0];
        assert!(si_sdr(&o, &orth).unwrap() < -40.0);
        assert!(si_sdr(&[0.0; 4], &s).is_err());
        assert!(si_sdr(&s, &s[..3]).is_err());
    }

    #[test]
    fn channels_round_trip() {
        let mut spec = Spectrogram::zeros(5, 3);
        for (i, c) in spec.data.iter_mut().enumerate() {
            *c = Complex64::new(i as f64, -(i as f64) * 0.5);
        }
        let t = to_channels::<f64>(&spec, 4).unwrap();
        assert_eq!(t.dims(), &[2, 4, 3]);
        let back = from_channels(&t, &spec).unwrap();
        assert_eq!(back, spec);
        let blank = from_channels(&t, &Spectrogram::zeros(5, 3)).unwrap();
        assert_eq!(blank.at(4, 2), Complex64::new(0.0, 0.0));
        assert_eq!(blank.at(3, 2), spec.at(3, 2));
    }

    proptest! {
        #[test]
        fn compression_round_trip(re in -50.0f64..50.0, im in -50.0f64..50.0) {
            let x = Complex64::new(re, im);
            prop_assume!(x.norm() > 1e-9);
            let back = decompress_coef(compress_coef(x));
            prop_assert!((back - x).norm() <= 1e-6 * x.norm());
            let c = compress_coef(x);
            prop_assert!((c.arg() - x.arg()).abs() < 1e-12);
        }

        #[test]
        fn si_sdr_scale_invariant(seed in 0u64..1000, a in 0.01f64..100.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e: Vec<f64> = s.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            let scaled: Vec<f64> = e.iter().map(|v| a * v).collect();
            let base = si_sdr(&s, &e).unwrap();
            prop_assert!((si_sdr(&s, &scaled).unwrap() - base).abs() < 1e-9);
        }
    }
}
