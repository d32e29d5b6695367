//! Training loop: bridge denoising loss, Adam with inverse-square-root
//! decay, forced weight normalization, EMA tracking and snapshots.

mod loss;
mod paramfile;

pub use loss::{empty_spec, spectral_loss, time_l1, WaveTarget};
pub use paramfile::{read_params, write_params, MAGIC};

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ema::{EmaTrace, SnapshotStore, TraceId, DEFAULT_GAMMAS};
use crate::error::{Error, Result};
use crate::mpnet::{DenoiserNet, NetConfig, ParamSet, Tape};
use crate::precond::{precondition, SignalStats, SkipMode};
use crate::schedule::BridgeSchedule;
use crate::signal::{compress, to_channels, Stft, StftConfig, SynthConfig};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "step,samples,lr,loss_spec,loss_l1,grad_norm";
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

/// Training items are drawn from the corpus rooted at `seed ^ DATA_SALT`,
/// keeping them apart from the `t`/noise stream.
const DATA_SALT: u64 = 0x0da7_a5ee_d000_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_ref_samples: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub skip_mode: SkipMode,
    pub seed: u64,
    pub snapshot_every: u64,
    pub total_steps: u64,
    pub ema_gammas: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2.5e-3,
            lr_ref_samples: 3e4,
            batch_size: 8,
            alpha: 0.0,
            skip_mode: SkipMode::CleanPrediction,
            seed: 0,
            snapshot_every: 256,
            total_steps: 4096,
            ema_gammas: DEFAULT_GAMMAS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("train.lr0", "must be > 0"));
        }
        if !(self.lr_ref_samples > 0.0) {
            return Err(Error::config("train.lr_ref_samples", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("train.alpha", "must be >= 0"));
        }
        if self.snapshot_every == 0 {
            return Err(Error::config("train.snapshot_every", "must be >= 1"));
        }
        if self.ema_gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::config("train.ema_gammas", "exponents must be finite and >= 0"));
        }
        Ok(())
    }

    /// `lr0 / sqrt(max(samples / lr_ref_samples, 1))`.
    pub fn lr(&self, samples_seen: u64) -> f64 {
        self.lr0 / (samples_seen as f64 / self.lr_ref_samples).max(1.0).sqrt()
    }
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = params.iter().map(|p| Tensor::zeros(p.value.dims())).collect();
        Adam {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every trainable parameter from its stored gradient.
    pub fn step(&mut self, params: &mut ParamSet<f32>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() / c2s + ADAM_EPS as f32);
            }
        }
    }
}

/// One minibatch of compressed spectra, `[B, 2, F, T]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x0: Tensor<f32>,
    pub y: Tensor<f32>,
    pub targets: Vec<WaveTarget>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub samples: u64,
    pub lr: f64,
    pub loss_spec: f64,
    pub loss_l1: f64,
    pub grad_norm: f64,
}

impl StepStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.samples, self.lr, self.loss_spec, self.loss_l1, self.grad_norm
        )
    }
}

/// Everything the training loop needs besides the output directory.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub schedule: BridgeSchedule,
    pub stats: SignalStats,
    pub stft: StftConfig,
    pub data: SynthConfig,
    pub net: NetConfig,
}

#[derive(Debug)]
pub struct Trainer {
    setup: TrainSetup,
    stft: Stft,
    net: DenoiserNet<f32>,
    adam: Adam,
    step: u64,
    samples: u64,
    rng: ChaCha8Rng,
    ema: Vec<EmaTrace>,
}

impl Trainer {
    pub fn new(setup: TrainSetup) -> Result<Self> {
        setup.train.validate()?;
        setup.schedule.validate()?;
        setup.stats.validate()?;
        setup.data.validate()?;
        setup.net.validate()?;
        let stft = Stft::new(setup.stft)?;
        if setup.net.freq_bins >= setup.stft.bins() {
            return Err(Error::config(
                "net.freq_bins",
                format!("must be below the {} STFT bins", setup.stft.bins()),
            ));
        }
        let frames = setup.stft.frames(setup.data.len);
        if frames % setup.net.downsample_factor() != 0 {
            return Err(Error::config(
                "data.len",
                format!("{frames} STFT frames are not divisible by {}", setup.net.downsample_factor()),
            ));
        }
        let net = DenoiserNet::new(setup.net.clone())?;
        let n = net.params().total_len();
        Ok(Trainer {
            adam: Adam::new(net.params()),
            ema: setup.train.ema_gammas.iter().map(|&g| EmaTrace::powerlaw(g, n)).collect(),
            rng: ChaCha8Rng::seed_from_u64(setup.train.seed),
            stft,
            net,
            step: 0,
            samples: 0,
            setup,
        })
    }

    pub fn net(&self) -> &DenoiserNet<f32> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenoiserNet<f32> {
        &mut self.net
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn ema_traces(&self) -> &[EmaTrace] {
        &self.ema
    }

    /// Batch for the current step, a pure function of the seed and step.
    pub fn batch(&self) -> Result<Batch> {
        let b = self.setup.train.batch_size as u64;
        let rows = self.setup.net.freq_bins;
        let want_wave = self.setup.train.alpha > 0.0;
        let (mut xs, mut ys, mut targets) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..b {
            let (clean, noisy) = self.setup.data.item(self.setup.train.seed ^ DATA_SALT, self.step * b + i);
            let xs_full = compress(&self.stft.forward(&clean.samples)?);
            let ys_full = compress(&self.stft.forward(&noisy.samples)?);
            xs.push(to_channels::<f32>(&xs_full, rows)?);
            ys.push(to_channels::<f32>(&ys_full, rows)?);
            if want_wave {
                targets.push(WaveTarget::new(&self.stft, xs_full, clean.len())?);
            }
        }
        Ok(Batch {
            x0: Tensor::stack(&xs)?,
            y: Tensor::stack(&ys)?,
            targets,
        })
    }

    /// One optimizer step on `batch`; returns the losses measured before the update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        let cfg = &self.setup.train;
        let n = batch.x0.dims()[0];
        batch.x0.ensure_same_shape(&batch.y)?;

        let ts: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(self.setup.schedule.t_eps..1.0))
            .collect();
        let mut pre = Vec::with_capacity(n);
        let mut x_t = Vec::with_capacity(n);
        let item_dims = &batch.x0.dims()[1..];
        for (i, &t) in ts.iter().enumerate() {
            let p = precondition(&self.setup.schedule, &self.setup.stats, cfg.skip_mode, t)?;
            debug_assert!((p.effective_weight() - 1.0).abs() < 1e-12);
            let x0 = Tensor::from_vec(item_dims, batch.x0.item(i).to_vec())?;
            let y = Tensor::from_vec(item_dims, batch.y.item(i).to_vec())?;
            let z_data = (0..x0.len()).map(|_| self.rng.sample::<f32, _>(StandardNormal)).collect();
            let z = Tensor::from_vec(item_dims, z_data)?;
            x_t.push(self.setup.schedule.sample_marginal(&x0, &y, t, &z)?);
            pre.push(p);
        }
        let x_t = Tensor::stack(&x_t)?;
        let mut x_in = x_t.clone();
        for (i, p) in pre.iter().enumerate() {
            let c = p.c_in as f32;
            x_in.item_mut(i).iter_mut().for_each(|v| *v *= c);
        }
        let cond = batch.y.scale(pre[0].c_cond as f32);

        let mut tape = Tape::new();
        let leaves = self.net.bind(&mut tape, true);
        let xin = tape.constant(x_in);
        let (f, _) = self.net.forward(&mut tape, &leaves, xin, &cond, &ts)?;
        let skip = x_t.scale(cfg.skip_mode.c_skip() as f32);
        let d = tape.scale_shift(f, pre.iter().map(|p| p.c_out as f32).collect(), &skip)?;
        let lambda: Vec<f32> = pre.iter().map(|p| p.lambda as f32).collect();
        let ls = tape.weighted_sse(d, batch.x0.clone(), lambda)?;
        let (root, l1) = if cfg.alpha > 0.0 {
            let l1 = time_l1(&mut tape, d, &batch.targets, &self.stft, cfg.alpha)?;
            (tape.add(ls, l1)?, Some(l1))
        } else {
            (ls, None)
        };
        let loss_spec = tape.value(ls).data()[0] as f64;
        let loss_l1 = l1.map_or(0.0, |id| tape.value(id).data()[0] as f64);

        let mut grads = tape.backward(root);
        self.net.store_grads(&mut grads, &leaves);
        let grad_norm = self
            .net
            .params()
            .iter()
            .map(|p| p.grad.data().iter().map(|&g| (g as f64).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !(loss_spec.is_finite() && loss_l1.is_finite() && grad_norm.is_finite()) {
            return Err(Error::NonFinite {
                context: format!(
                    "training step {}: loss_spec {loss_spec}, loss_l1 {loss_l1}, grad norm {grad_norm}, t = {ts:?}",
                    self.step
                ),
            });
        }

        let lr = cfg.lr(self.samples);
        let stats = StepStats {
            step: self.step,
            samples: self.samples,
            lr,
            loss_spec,
            loss_l1,
            grad_norm,
        };
        self.adam.step(self.net.params_mut(), lr);
        self.net.params_mut().force_norm_all();
        let flat = self.net.params().flatten();
        for tr in &mut self.ema {
            tr.update(&flat)?;
        }
        self.step += 1;
        self.samples += n as u64;
        Ok(stats)
    }

    fn named_from_flat(&self, flat: &[f64]) -> Result<Vec<(String, Tensor<f32>)>> {
        let mut set = self.net.params().clone();
        set.assign_flat(flat)?;
        Ok(set.iter().map(|p| (p.name.clone(), p.value.clone())).collect())
    }

    /// Saves the raw parameters and every EMA trace at the current step.
    pub fn save_snapshot(&self, store: &mut SnapshotStore) -> Result<()> {
        let raw: Vec<(&str, &Tensor<f32>)> = self.net.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
        store.save(self.step, TraceId::Raw, raw)?;
        for tr in &self.ema {
            let gamma = match tr.kind {
                crate::ema::EmaKind::PowerLaw { gamma } => gamma,
                crate::ema::EmaKind::Fixed { .. } => unreachable!("trainer tracks power-law traces only"),
            };
            let named = self.named_from_flat(&tr.value)?;
            store.save(self.step, TraceId::Gamma(gamma), named.iter().map(|(n, t)| (n.as_str(), t)))?;
        }
        Ok(())
    }

    /// Runs all remaining steps, writing `train.csv`, `snapshots/` and
    /// `model.bin` (final raw parameters) under `out`.
    pub fn run(&mut self, out: &Path) -> Result<Vec<StepStats>> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let csv_path = out.join("train.csv");
        let io = |e| Error::io(&csv_path, e);
        let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path).map_err(io)?);
        writeln!(csv, "{CSV_HEADER}").map_err(io)?;
        let mut store = SnapshotStore::create(&out.join("snapshots"))?;
        let total = self.setup.train.total_steps;
        let every = self.setup.train.snapshot_every;
        let mut history = Vec::with_capacity(total as usize);
        let started = std::time::Instant::now();
        while self.step < total {
            let batch = self.batch()?;
            let s = self.train_step(&batch)?;
            writeln!(csv, "{}", s.csv_row()).map_err(io)?;
            if self.step % every == 0 {
                self.save_snapshot(&mut store)?;
                csv.flush().map_err(io)?;
                log::info!(
                    "step {}/{total}: loss_spec {:.4}, lr {:.3e}, {:.1}s",
                    self.step,
                    s.loss_spec,
                    s.lr,
                    started.elapsed().as_secs_f64()
                );
            }
            history.push(s);
        }
        csv.flush().map_err(io)?;
        let model = out.join("model.bin");
        write_params(&model, self.net.params().iter().map(|p| (p.name.as_str(), &p.value)))?;
        Ok(history)
    }
}
