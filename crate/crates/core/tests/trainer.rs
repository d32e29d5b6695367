use edm2se::ema::{response_profile, SnapshotStore, TraceId};
use edm2se::mpnet::NetConfig;
use edm2se::precond::{SignalStats, SkipMode};
use edm2se::schedule::BridgeSchedule;
use edm2se::signal::{StftConfig, SynthConfig};
use edm2se::trainer::{read_params, TrainConfig, TrainSetup, Trainer, CSV_HEADER};

fn tiny_setup(train: TrainConfig) -> TrainSetup {
    TrainSetup {
        train,
        schedule: BridgeSchedule::default(),
        stats: SignalStats::new(0.0064, 0.0085).unwrap(),
        stft: StftConfig::default(),
        data: SynthConfig::default(),
        net: NetConfig {
            channels: vec![4, 8],
            blocks_per_level: 1,
            emb_dim: 8,
            freq_bins: 16,
            ..NetConfig::default()
        },
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        total_steps: 6,
        snapshot_every: 3,
        ..TrainConfig::default()
    }
}

fn run_steps(setup: TrainSetup, steps: usize) -> (Trainer, Vec<edm2se::trainer::StepStats>) {
    let mut tr = Trainer::new(setup).unwrap();
    let mut out = Vec::new();
    for _ in 0..steps {
        let b = tr.batch().unwrap();
        out.push(tr.train_step(&b).unwrap());
    }
    (tr, out)
}

#[test]
fn same_seed_same_trajectory() {
    let (a, sa) = run_steps(tiny_setup(train_cfg()), 3);
    let (b, sb) = run_steps(tiny_setup(train_cfg()), 3);
    assert_eq!(sa, sb);
    assert_eq!(a.net().params().flatten(), b.net().params().flatten());
    let (_, sc) = run_steps(tiny_setup(TrainConfig { seed: 9, ..train_cfg() }), 1);
    assert_ne!(sa[0].loss_spec, sc[0].loss_spec);
}

#[test]
fn waveform_term_only_changes_the_l1_column_before_the_first_update() {
    let (_, plain) = run_steps(tiny_setup(train_cfg()), 1);
    let (_, with_l1) = run_steps(tiny_setup(TrainConfig { alpha: 0.001, ..train_cfg() }), 1);
    let (p, w) = (plain[0], with_l1[0]);
    assert_eq!((p.step, p.samples, p.lr, p.loss_spec), (w.step, w.samples, w.lr, w.loss_spec));
    assert_eq!(p.loss_l1, 0.0);
    assert!(w.loss_l1 > 0.0);
}

#[test]
fn learning_rate_decays_with_inverse_square_root() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr(0), 2.5e-3);
    assert_eq!(cfg.lr(30_000), 2.5e-3);
    assert!((cfg.lr(120_000) - 1.25e-3).abs() < 1e-15);
    assert!((cfg.lr(60_000) - 2.5e-3 / 2f64.sqrt()).abs() < 1e-15);
}

#[test]
fn weights_stay_on_the_sphere_after_every_step() {
    let mut tr = Trainer::new(tiny_setup(TrainConfig { lr0: 0.05, ..train_cfg() })).unwrap();
    for _ in 0..5 {
        let b = tr.batch().unwrap();
        tr.train_step(&b).unwrap();
        assert!(tr.net().params().max_norm_deviation() < 1e-6);
    }
}

#[test]
fn ema_traces_equal_profile_weighted_history() {
    let mut tr = Trainer::new(tiny_setup(train_cfg())).unwrap();
    let mut history = Vec::new();
    for _ in 0..5 {
        let b = tr.batch().unwrap();
        tr.train_step(&b).unwrap();
        history.push(tr.net().params().flatten());
    }
    for trace in tr.ema_traces() {
        let w = trace.kind.profile(history.len()).weights;
        for (k, v) in trace.value.iter().enumerate().step_by(37) {
            let direct: f64 = w.iter().zip(&history).map(|(a, h)| a * h[k]).sum();
            assert!((v - direct).abs() < 1e-9 * direct.abs().max(1.0), "{v} vs {direct}");
        }
    }
}

#[test]
fn batches_are_a_function_of_seed_and_step() {
    let a = Trainer::new(tiny_setup(train_cfg())).unwrap();
    let b = Trainer::new(tiny_setup(train_cfg())).unwrap();
    let (ba, bb) = (a.batch().unwrap(), b.batch().unwrap());
    assert_eq!(ba.x0, bb.x0);
    assert_eq!(ba.x0.dims(), &[2, 2, 16, 32]);
}

#[test]
fn run_writes_log_snapshots_and_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut tr = Trainer::new(tiny_setup(train_cfg())).unwrap();
    let hist = tr.run(dir.path()).unwrap();
    assert_eq!(hist.len(), 6);
    let csv = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.count(), 6);

    let store = SnapshotStore::open(&dir.path().join("snapshots")).unwrap();
    // two EMA traces and the raw parameters at steps 3 and 6
    assert_eq!(store.records().len(), 6);
    assert_eq!(store.records().iter().filter(|r| r.trace == TraceId::Raw).count(), 2);
    let model = read_params(&dir.path().join("model.bin")).unwrap();
    let raw = store.load_raw_final().unwrap();
    assert_eq!(model, raw);
    assert_eq!(model.len(), tr.net().params().len());
}

#[test]
fn reconstruction_at_a_stored_profile_returns_that_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut tr = Trainer::new(tiny_setup(train_cfg())).unwrap();
    tr.run(dir.path()).unwrap();
    let store = SnapshotStore::open(&dir.path().join("snapshots")).unwrap();
    let rec = store
        .records()
        .iter()
        .filter(|r| r.trace == TraceId::Gamma(6.94))
        .max_by_key(|r| r.step)
        .unwrap()
        .clone();
    let target = response_profile(rec.step as usize, 6.94).sigma_rel();
    let (params, fit) = store.reconstruct(target, None).unwrap();
    assert!(fit.residual < 1e-4, "{}", fit.residual);
    let snap = store.load(&rec).unwrap();
    for ((n1, a), (n2, b)) in params.iter().zip(&snap) {
        assert_eq!(n1, n2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-4 * y.abs().max(1.0), "{n1}: {x} vs {y}");
        }
    }
}

#[test]
fn noise_prediction_mode_trains() {
    let (tr, stats) = run_steps(
        tiny_setup(TrainConfig {
            skip_mode: SkipMode::NoisePrediction,
            ..train_cfg()
        }),
        2,
    );
    assert!(stats.iter().all(|s| s.loss_spec.is_finite()));
    assert_eq!(tr.step_count(), 2);
}

#[test]
fn invalid_setups_are_rejected() {
    let mut s = tiny_setup(train_cfg());
    s.net.freq_bins = 65;
    assert!(Trainer::new(s).is_err());
    let mut s = tiny_setup(train_cfg());
    s.data.len = 1024; // 33 frames
    assert!(Trainer::new(s).is_err());
    assert!(Trainer::new(tiny_setup(TrainConfig { batch_size: 0, ..train_cfg() })).is_err());
}
