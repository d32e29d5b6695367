//! Toy magnitude-preserving encoder/decoder denoiser.
//!
//! Every block follows the EDM2 residual layout (SiLU, conv, embedding
//! modulation, SiLU, conv, fixed `t = 0.3` residual merge) and then fuses the
//! conditioner, average-pooled to the block's resolution and projected by a
//! 1x1 convolution, with a learned MP-Add. Decoder blocks merge the matching
//! encoder activation with an equal-weight MP-Add instead of concatenation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::tape::{Gradients, NodeId, Tape, Tau};
use super::{ParamSet, Parameter};

const RESIDUAL_TAU: f64 = 0.3;
const SKIP_TAU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Channel width per resolution level, finest first.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    /// Number of frozen cosine features of `t`.
    pub emb_dim: usize,
    /// Frequency rows seen by the network.
    pub freq_bins: usize,
    pub in_channels: usize,
    pub eps: f64,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: vec![16, 32],
            blocks_per_level: 2,
            emb_dim: 64,
            freq_bins: 64,
            in_channels: 2,
            eps: super::WEIGHT_NORM_EPS,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    /// Spatial extents must be divisible by this.
    pub fn downsample_factor(&self) -> usize {
        1 << self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("net.channels", "need at least one non-zero width"));
        }
        if self.blocks_per_level == 0 || self.emb_dim == 0 || self.in_channels == 0 {
            return Err(Error::config("net", "block count, emb_dim and in_channels must be positive"));
        }
        if self.freq_bins == 0 || self.freq_bins % self.downsample_factor() != 0 {
            return Err(Error::config(
                "net.freq_bins",
                format!("{} is not divisible by {}", self.freq_bins, self.downsample_factor()),
            ));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("net.eps", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    skip: Option<usize>,
    conv0: usize,
    conv1: usize,
    emb_w: usize,
    emb_gain: usize,
    cond_w: usize,
    cond_logit: usize,
    level: usize,
}

#[derive(Clone, Debug)]
pub struct DenoiserNet<S> {
    cfg: NetConfig,
    params: ParamSet<S>,
    emb_freqs: usize,
    emb_phases: usize,
    conv_in: usize,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    conv_out: usize,
    out_gain: usize,
}

struct Builder<'a, S> {
    params: ParamSet<S>,
    rng: &'a mut ChaCha8Rng,
}

impl<S: Scalar> Builder<'_, S> {
    fn weight(&mut self, name: String, out: usize, fan_in: usize) -> usize {
        let data = (0..out * fan_in)
            .map(|_| S::lit(self.rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mut p = Parameter::new(name, Tensor::from_vec(&[out, fan_in], data).expect("dims"), true, true);
        p.force_norm();
        self.params.push(p)
    }

    fn scalar(&mut self, name: String, v: f64) -> usize {
        self.params.push(Parameter::new(name, Tensor::scalar(S::lit(v)), false, true))
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, level: usize, cfg: &NetConfig) -> Block {
        Block {
            skip: (cin != cout).then(|| self.weight(format!("{name}.skip"), cout, cin)),
            conv0: self.weight(format!("{name}.conv0"), cout, cout * 9),
            conv1: self.weight(format!("{name}.conv1"), cout, cout * 9),
            emb_w: self.weight(format!("{name}.emb"), cout, cfg.emb_dim),
            emb_gain: self.scalar(format!("{name}.emb_gain"), 0.0),
            cond_w: self.weight(format!("{name}.cond"), cout, cfg.in_channels),
            cond_logit: self.scalar(format!("{name}.cond_logit"), 0.0),
            level,
        }
    }
}

impl<S: Scalar> DenoiserNet<S> {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut b = Builder {
            params: ParamSet::new(),
            rng: &mut rng,
        };
        let freqs = (0..cfg.emb_dim).map(|_| S::lit(b.rng.sample::<f64, _>(StandardNormal))).collect();
        let phases = (0..cfg.emb_dim).map(|_| S::lit(b.rng.random::<f64>())).collect();
        let emb_freqs = b.params.push(Parameter::new("emb.freqs", Tensor::from_vec(&[cfg.emb_dim], freqs)?, false, false));
        let emb_phases = b.params.push(Parameter::new("emb.phases", Tensor::from_vec(&[cfg.emb_dim], phases)?, false, false));

        let c0 = cfg.channels[0];
        let conv_in = b.weight("conv_in".into(), c0, cfg.in_channels * 9);
        let mut encoder = Vec::new();
        let mut width = c0;
        for (level, &c) in cfg.channels.iter().enumerate() {
            for i in 0..cfg.blocks_per_level {
                encoder.push(b.block(&format!("enc{level}.{i}"), width, c, level, &cfg));
                width = c;
            }
        }
        let mut decoder = Vec::new();
        for (level, &c) in cfg.channels.iter().enumerate().rev() {
            for i in 0..cfg.blocks_per_level {
                decoder.push(b.block(&format!("dec{level}.{i}"), width, c, level, &cfg));
                width = c;
            }
        }
        let conv_out = b.weight("conv_out".into(), cfg.in_channels, c0 * 9);
        let out_gain = b.scalar("out_gain".into(), 0.0);
        Ok(DenoiserNet {
            params: b.params,
            cfg,
            emb_freqs,
            emb_phases,
            conv_in,
            encoder,
            decoder,
            conv_out,
            out_gain,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Overwrites every parameter from a named list, matching by name and shape.
    pub fn load_named(&mut self, named: &[(String, Tensor<f32>)]) -> Result<()> {
        for p in self.params.iter_mut() {
            let (_, src) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::config(p.name.clone(), "missing from parameter file"))?;
            if src.dims() != p.value.dims() {
                return Err(Error::Shape {
                    expected: p.value.dims().to_vec(),
                    got: src.dims().to_vec(),
                });
            }
            p.value = src.cast();
        }
        if named.len() != self.params.len() {
            return Err(Error::config(
                "parameters",
                format!("file has {} tensors, network expects {}", named.len(), self.params.len()),
            ));
        }
        Ok(())
    }

    /// Index of the output gain, which starts at zero.
    pub fn out_gain_index(&self) -> usize {
        self.out_gain
    }

    /// Places every parameter on the tape. Trainable ones become gradient
    /// leaves when `track` is set; everything else is constant.
    pub fn bind(&self, tape: &mut Tape<S>, track: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if track && p.trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Writes the gradients of bound leaves into `Parameter::grad`.
    pub fn store_grads(&mut self, grads: &mut Gradients<S>, leaves: &[NodeId]) {
        for (p, &id) in self.params.iter_mut().zip(leaves) {
            match grads.take(id) {
                Some(g) => p.grad = g,
                None => p.grad = Tensor::zeros(p.value.dims()),
            }
        }
    }

    fn check_input(&self, x: &Tensor<S>, cond: &Tensor<S>, t: &[f64]) -> Result<()> {
        x.ensure_same_shape(cond)?;
        let d = x.dims();
        let f = self.cfg.downsample_factor();
        if d.len() != 4 || d[1] != self.cfg.in_channels || d[2] != self.cfg.freq_bins || d[3] % f != 0 || d[0] != t.len() {
            return Err(Error::Shape {
                expected: vec![t.len(), self.cfg.in_channels, self.cfg.freq_bins, f * d.get(3).map_or(1, |v| v / f).max(1)],
                got: d.to_vec(),
            });
        }
        Ok(())
    }

    fn time_embedding(&self, t: &[f64]) -> Tensor<S> {
        let freqs = self.params.get(self.emb_freqs).value.data();
        let phases = self.params.get(self.emb_phases).value.data();
        let tau = std::f64::consts::TAU;
        let data = t
            .iter()
            .flat_map(|&ti| {
                freqs.iter().zip(phases).map(move |(f, p)| {
                    S::lit(std::f64::consts::SQRT_2 * (tau * (f.as_f64() * ti + p.as_f64())).cos())
                })
            })
            .collect();
        Tensor::from_vec(&[t.len(), self.cfg.emb_dim], data).expect("dims")
    }

    /// Records the network on `tape`. `x_in` and `cond` are `[N, C, F, T]`
    /// and already preconditioned; `t` holds one process time per item.
    /// Returns the output node and the output node of every block.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        leaves: &[NodeId],
        x_in: NodeId,
        cond: &Tensor<S>,
        t: &[f64],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_input(tape.value(x_in), cond, t)?;
        let eps = S::lit(self.cfg.eps);
        let w = |tape: &mut Tape<S>, idx: usize| tape.normalize_weight(leaves[idx], eps);

        let emb = tape.constant(self.time_embedding(t));
        // 2x2 averaging of white input divides the std by two
        let pool_gain = tape.constant(Tensor::scalar(S::lit(2.0)));
        let pool = |tape: &mut Tape<S>, x: NodeId| -> Result<NodeId> {
            let p = tape.avg_pool2(x)?;
            Ok(tape.mul_scalar(p, pool_gain))
        };
        let mut conds = vec![tape.constant(cond.clone())];
        for _ in 1..self.cfg.channels.len() {
            let prev = *conds.last().expect("non-empty");
            conds.push(pool(tape, prev)?);
        }

        let mut trace = Vec::new();
        let wi = w(tape, self.conv_in);
        let mut h = tape.conv2d(x_in, wi, 3, 3)?;
        let mut level = 0;
        let mut skips = Vec::new();
        for blk in &self.encoder {
            if blk.level != level {
                h = pool(tape, h)?;
                level = blk.level;
            }
            h = self.block(tape, leaves, h, emb, conds[level], blk)?;
            trace.push(h);
            skips.push(h);
        }
        for blk in &self.decoder {
            if blk.level != level {
                h = tape.upsample2(h);
                level = blk.level;
            }
            h = self.block(tape, leaves, h, emb, conds[level], blk)?;
            let s = skips.pop().expect("one skip per decoder block");
            h = tape.mp_add(h, s, Tau::Fixed(S::lit(SKIP_TAU)))?;
            trace.push(h);
        }
        let a = tape.mp_silu(h);
        let wo = w(tape, self.conv_out);
        let out = tape.conv2d(a, wo, 3, 3)?;
        let out = tape.mul_scalar(out, leaves[self.out_gain]);
        Ok((out, trace))
    }

    fn block(&self, tape: &mut Tape<S>, leaves: &[NodeId], x: NodeId, emb: NodeId, cond: NodeId, blk: &Block) -> Result<NodeId> {
        let eps = S::lit(self.cfg.eps);
        let mut x = x;
        if let Some(s) = blk.skip {
            let ws = tape.normalize_weight(leaves[s], eps);
            x = tape.conv2d(x, ws, 1, 1)?;
        }
        let y = tape.mp_silu(x);
        let w0 = tape.normalize_weight(leaves[blk.conv0], eps);
        let y = tape.conv2d(y, w0, 3, 3)?;
        let we = tape.normalize_weight(leaves[blk.emb_w], eps);
        let e = tape.linear(emb, we)?;
        let y = tape.modulate(y, e, leaves[blk.emb_gain])?;
        let y = tape.mp_silu(y);
        let w1 = tape.normalize_weight(leaves[blk.conv1], eps);
        let y = tape.conv2d(y, w1, 3, 3)?;
        let x = tape.mp_add(x, y, Tau::Fixed(S::lit(RESIDUAL_TAU)))?;
        let wc = tape.normalize_weight(leaves[blk.cond_w], eps);
        let c = tape.conv2d(cond, wc, 1, 1)?;
        tape.mp_add(x, c, Tau::Logit(leaves[blk.cond_logit]))
    }

    /// Inference-only forward pass.
    pub fn eval(&self, x_in: &Tensor<S>, cond: &Tensor<S>, t: &[f64]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let leaves = self.bind(&mut tape, false);
        let x = tape.constant(x_in.clone());
        let (out, _) = self.forward(&mut tape, &leaves, x, cond, t)?;
        Ok(tape.value(out).clone())
    }

    /// Standard deviation of every block's output, for magnitude diagnostics.
    pub fn block_stds(&self, x_in: &Tensor<S>, cond: &Tensor<S>, t: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let leaves = self.bind(&mut tape, false);
        let x = tape.constant(x_in.clone());
        let (_, trace) = self.forward(&mut tape, &leaves, x, cond, t)?;
        Ok(trace
            .iter()
            .map(|&id| {
                let d = tape.value(id).data();
                let n = d.len() as f64;
                let mean = d.iter().map(|v| v.as_f64()).sum::<f64>() / n;
                (d.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
            })
            .collect())
    }
}
