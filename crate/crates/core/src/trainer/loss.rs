//! Loss terms recorded on the tape.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::mpnet::{NodeId, Tape};
use crate::signal::{decompress, decompress_vjp, from_channels, Spectrogram, Stft};
use crate::tensor::{Scalar, Tensor};

/// Time-domain reference of one training item.
#[derive(Clone, Debug)]
pub struct WaveTarget {
    /// Compressed clean spectrogram with every frequency row. Rows the
    /// network does not produce are taken from here.
    pub spec: Spectrogram,
    /// `istft(decompress(spec))`.
    pub wave: Vec<f64>,
}

impl WaveTarget {
    pub fn new(stft: &Stft, spec: Spectrogram, len: usize) -> Result<Self> {
        let wave = stft.inverse(&decompress(&spec), len)?;
        Ok(WaveTarget { spec, wave })
    }
}

/// `(1/N) sum_n lambda_n ||d_n - x0_n||^2` evaluated off the tape.
pub fn spectral_loss<S: Scalar>(d: &Tensor<S>, x0: &Tensor<S>, lambda: &[f64]) -> Result<f64> {
    d.ensure_same_shape(x0)?;
    let n = d.dims()[0];
    if lambda.len() != n {
        return Err(Error::Shape {
            expected: vec![n],
            got: vec![lambda.len()],
        });
    }
    let total: f64 = (0..n)
        .map(|i| {
            lambda[i]
                * d.item(i)
                    .iter()
                    .zip(x0.item(i))
                    .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                    .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

/// `alpha (1/N) sum_n ||istft(decompress(d_n)) - wave_n||_1` for `d` of
/// shape `[N, 2, F, T]` holding compressed spectra.
pub fn time_l1<S: Scalar>(tape: &mut Tape<S>, d: NodeId, targets: &[WaveTarget], stft: &Stft, alpha: f64) -> Result<NodeId> {
    let dv = tape.value(d);
    let dims = dv.dims().to_vec();
    if dims.len() != 4 || dims[0] != targets.len() || dims[1] != 2 {
        return Err(Error::Shape {
            expected: vec![targets.len(), 2, stft.config().bins(), 0],
            got: dims,
        });
    }
    let n = targets.len();
    let item_dims = [2, dims[2], dims[3]];
    let mut total = 0.0;
    let mut signs = Vec::with_capacity(n);
    let mut specs = Vec::with_capacity(n);
    for (i, tg) in targets.iter().enumerate() {
        let item = Tensor::from_vec(&item_dims, dv.item(i).to_vec())?;
        let z = from_channels(&item, &tg.spec)?;
        let wave = stft.inverse(&decompress(&z), tg.wave.len())?;
        let s: Vec<f64> = wave
            .iter()
            .zip(&tg.wave)
            .map(|(a, b)| {
                let e = a - b;
                total += e.abs();
                e.signum() * (e != 0.0) as u8 as f64
            })
            .collect();
        signs.push(s);
        specs.push(z);
    }
    let scale = alpha / n as f64;
    let value = Tensor::scalar(S::lit(scale * total));
    let stft = stft.clone();
    Ok(tape.custom(vec![d], value, move |g, _| {
        let g0 = g.data()[0].as_f64() * scale;
        let (rows, frames) = (item_dims[1], item_dims[2]);
        let plane = rows * frames;
        let mut out = Tensor::zeros(&dims);
        for (i, (s, z)) in signs.iter().zip(&specs).enumerate() {
            let gw: Vec<f64> = s.iter().map(|v| v * g0).collect();
            let gs = stft.inverse_adjoint(&gw, frames).expect("frame count checked in forward");
            let slab = out.item_mut(i);
            for k in 0..plane {
                let v = decompress_vjp(z.data[k], gs.data[k]);
                slab[k] = S::lit(v.re);
                slab[plane + k] = S::lit(v.im);
            }
        }
        vec![out]
    }))
}

/// Zero-filled spectrogram matching `stft` for a `len`-sample signal.
pub fn empty_spec(stft: &Stft, len: usize) -> Spectrogram {
    let cfg = stft.config();
    Spectrogram {
        bins: cfg.bins(),
        frames: cfg.frames(len),
        data: vec![Complex64::new(0.0, 0.0); cfg.bins() * cfg.frames(len)],
    }
}
