use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::ValueEnum;
use edm2se::config::RunConfig;
use edm2se::ema::{ema_sweep as sweep, write_sweep_csv, SnapshotStore, INDEX_FILE};
use edm2se::eval::{evaluate, EvalSet};
use edm2se::mpnet::DenoiserNet;
use edm2se::precond::SignalStats;
use edm2se::sampler::{enhance_waveforms, NetDenoiser};
use edm2se::selftest::run_all;
use edm2se::signal::{corpus_stats, read_wav, read_wav_dir, write_wav, Stft, WavFormat};
use edm2se::trainer::{read_params, write_params, Trainer};
use edm2se::{Error, Result};

/// Overrides `train.seed` when set.
pub const SEED_ENV: &str = "EDM2SE_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    #[value(name = "si_sdr")]
    SiSdr,
    #[value(name = "loss")]
    Loss,
}

pub fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Config { .. } | Error::Json(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn config_error(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Loads a config, applying the seed override.
fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.train.seed = v
            .trim()
            .parse()
            .map_err(|_| config_error(SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
    }
    Ok(cfg)
}

fn resolved_stats(cfg: &RunConfig) -> Result<SignalStats> {
    cfg.stats
        .ok_or_else(|| config_error("stats", "missing; use the config.json written by `train`"))
}

pub fn selftest(config: Option<&Path>) -> Result<ExitCode> {
    // parsed without validation so that broken constants reach the checks
    let cfg: RunConfig = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            serde_json::from_str(&text).map_err(|e| config_error("config", e.to_string()))?
        }
        None => RunConfig::default(),
    };
    let stats = cfg.stats.unwrap_or_default();
    let started = std::time::Instant::now();
    let checks = run_all(&cfg.schedule, &stats);
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    println!("{:<6} {:<width$} {:>12}    limit", "result", "check", "measured");
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag:<6} {:<width$} {:>12.3e} {} {:.1e}", c.name, c.value, c.relation(), c.limit);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    println!(
        "{} of {} checks passed in {:.1}s",
        checks.len() - failed.len(),
        checks.len(),
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for name in &failed {
            eprintln!("failed: {name}");
        }
        Ok(ExitCode::from(1))
    }
}

pub fn train(config: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let (stats, source, items) = match cfg.stats {
        Some(s) => (s, "config", 0),
        None => {
            let c = corpus_stats(&cfg.data, cfg.stft, cfg.stats_items, cfg.train.seed)?;
            log::info!(
                "measured sigma_x2 = {:.5}, sigma_n2 = {:.5} on {} items",
                c.sigma_x2,
                c.sigma_n2,
                c.items
            );
            (SignalStats::new(c.sigma_x2, c.sigma_n2)?, "measured", c.items)
        }
    };
    cfg.stats = Some(stats);
    std::fs::write(out.join("config.json"), cfg.to_json()?).map_err(|e| io_error(&out.join("config.json"), e))?;
    write_json(
        &out.join("stats.json"),
        &serde_json::json!({
            "sigma_x2": stats.sigma_x2,
            "sigma_n2": stats.sigma_n2,
            "source": source,
            "items": items,
        }),
    )?;
    let mut trainer = Trainer::new(cfg.train_setup(stats))?;
    let history = trainer.run(out)?;
    if let Some(last) = history.last() {
        log::info!("finished {} steps, final loss_spec {:.4}", trainer.step_count(), last.loss_spec);
    }
    Ok(ExitCode::SUCCESS)
}

/// Accepts a run directory or the snapshot directory itself.
fn open_store(path: &Path) -> Result<SnapshotStore> {
    if path.join(INDEX_FILE).exists() {
        SnapshotStore::open(path)
    } else {
        SnapshotStore::open(&path.join("snapshots"))
    }
}

pub fn ema_reconstruct(store: &Path, sigma_rel: f64, out: &Path) -> Result<ExitCode> {
    let store = open_store(store)?;
    let (params, rec) = store.reconstruct(sigma_rel, None)?;
    log::info!(
        "sigma_rel {sigma_rel}: {} snapshots, profile residual {:.3e}{}",
        rec.coefficients.len(),
        rec.residual,
        if rec.rank_deficient { " (minimum-norm fallback)" } else { "" }
    );
    write_params(out, params.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(ExitCode::SUCCESS)
}

/// `config.json` of the run that owns `store`.
fn run_config_for_store(store: &SnapshotStore) -> PathBuf {
    let dir = store.dir();
    let parent = dir.parent().filter(|p| dir.file_name().is_some_and(|n| n == "snapshots") && !p.as_os_str().is_empty());
    parent.unwrap_or(dir).join("config.json")
}

pub fn ema_sweep(store: &Path, grid: &[f64], metric: Metric, out: &Path, config: Option<&Path>) -> Result<ExitCode> {
    let store = open_store(store)?;
    let cfg_path = config.map(Path::to_path_buf).unwrap_or_else(|| run_config_for_store(&store));
    let cfg = load_config(Some(&cfg_path))?;
    let stats = resolved_stats(&cfg)?;
    let set = EvalSet::new(&cfg.data, &cfg.eval);
    let rows = sweep(&store, grid, None, |params| {
        let mut net = DenoiserNet::new(cfg.net.clone())?;
        net.load_named(params)?;
        let r = evaluate(&net, &cfg, stats, &set)?;
        log::info!("si_sdr {:.3} dB (input {:.3} dB), loss {:.4}", r.si_sdr_enhanced, r.si_sdr_noisy, r.loss);
        Ok(r.into())
    });
    write_sweep_csv(out, &rows)?;
    let score = |m: &edm2se::ema::SweepMetrics| match metric {
        Metric::SiSdr => m.si_sdr,
        Metric::Loss => -m.loss,
    };
    let best = rows
        .iter()
        .filter_map(|r| r.result.as_ref().ok().map(|m| (r.sigma_rel, score(m))))
        .filter(|(_, s)| s.is_finite())
        .max_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((s, _)) = best {
        log::info!("best sigma_rel by {metric:?}: {s}");
    }
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        eprintln!("{failed} of {} grid points failed", rows.len());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn enhance(model: &Path, input: &Path, out: &Path, steps: Option<usize>, config: Option<&Path>) -> Result<ExitCode> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => model.parent().unwrap_or(Path::new(".")).join("config.json"),
    };
    let mut cfg = load_config(Some(&cfg_path))?;
    if let Some(n) = steps {
        cfg.sampler.n_steps = n;
    }
    cfg.validate()?;
    let stats = resolved_stats(&cfg)?;
    let mut net = DenoiserNet::new(cfg.net.clone())?;
    net.load_named(&read_params(model)?)?;
    let inputs = if input.is_dir() {
        std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
        read_wav_dir(input)?
            .into_iter()
            .map(|(p, w)| {
                let name = p.file_name().expect("directory entries have names").to_owned();
                (p, w, out.join(name))
            })
            .collect()
    } else {
        vec![(input.to_path_buf(), read_wav(input)?, out.to_path_buf())]
    };
    let den = NetDenoiser {
        net: &net,
        schedule: cfg.schedule,
        stats,
        mode: cfg.train.skip_mode,
    };
    let stft = Stft::new(cfg.stft)?;
    for (src, noisy, dst) in &inputs {
        if noisy.sample_rate != cfg.data.sample_rate {
            log::warn!(
                "{} is sampled at {} Hz; the model was trained at {} Hz",
                src.display(),
                noisy.sample_rate,
                cfg.data.sample_rate
            );
        }
        let enhanced = enhance_waveforms(
            std::slice::from_ref(noisy),
            &den,
            cfg.net.freq_bins,
            cfg.net.downsample_factor(),
            &stft,
            &cfg.schedule,
            &cfg.sampler,
        )?;
        write_wav(dst, &enhanced[0], WavFormat::Float32)?;
        log::info!("{} -> {}", src.display(), dst.display());
    }
    Ok(ExitCode::SUCCESS)
}
