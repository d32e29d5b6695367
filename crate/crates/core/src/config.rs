//! The single JSON document describing a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpnet::NetConfig;
use crate::precond::SignalStats;
use crate::sampler::SamplerConfig;
use crate::schedule::BridgeSchedule;
use crate::signal::{StftConfig, SynthConfig};
use crate::trainer::{TrainConfig, TrainSetup};

/// Held-out mixtures used for evaluation and sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub items: usize,
    pub snr_db: f64,
    pub len: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            items: 32,
            snr_db: 5.0,
            len: 2048,
            seed: 1_000_003,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: BridgeSchedule,
    /// Fixed statistics; measured on the synthetic corpus when absent.
    pub stats: Option<SignalStats>,
    pub stats_items: usize,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub stft: StftConfig,
    pub data: SynthConfig,
    pub net: NetConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schedule: BridgeSchedule::default(),
            stats: None,
            stats_items: 512,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            stft: StftConfig::default(),
            data: SynthConfig::default(),
            net: NetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if let Some(s) = &self.stats {
            s.validate()?;
        }
        if self.stats.is_none() && self.stats_items == 0 {
            return Err(Error::config("stats_items", "must be >= 1 when stats are measured"));
        }
        self.train.validate()?;
        self.sampler.validate()?;
        self.stft.validate()?;
        self.data.validate()?;
        self.net.validate()?;
        if self.net.in_channels != 2 {
            return Err(Error::config("net.in_channels", "must be 2 (real and imaginary parts)"));
        }
        if self.net.freq_bins >= self.stft.bins() {
            return Err(Error::config(
                "net.freq_bins",
                format!("must be below the {} STFT bins", self.stft.bins()),
            ));
        }
        if self.data.len < self.stft.win_len {
            return Err(Error::config("data.len", "must cover at least one STFT window"));
        }
        if self.stft.frames(self.data.len) % self.net.downsample_factor() != 0 {
            return Err(Error::config(
                "data.len",
                format!(
                    "{} samples give {} frames, not divisible by {}",
                    self.data.len,
                    self.stft.frames(self.data.len),
                    self.net.downsample_factor()
                ),
            ));
        }
        if self.eval.items == 0 || self.eval.len < self.stft.win_len || !self.eval.snr_db.is_finite() {
            return Err(Error::config("eval", "need items >= 1, len >= one window and a finite snr_db"));
        }
        Ok(())
    }

    pub fn train_setup(&self, stats: SignalStats) -> TrainSetup {
        TrainSetup {
            train: self.train.clone(),
            schedule: self.schedule,
            stats,
            stft: self.stft,
            data: self.data.clone(),
            net: self.net.clone(),
        }
    }
}
