//! On-disk snapshots of raw and averaged parameters.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{gamma_from_sigma_rel, response_profile, solve_profile_weights, Reconstruction};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{read_params, write_params};

pub const INDEX_FILE: &str = "index.json";

/// Which sequence a snapshot belongs to: the raw parameters or a power-law
/// trace. Serialized as the string `"raw"` or the exponent as a number.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TraceId {
    Raw,
    Gamma(f64),
}

impl fmt::Display for TraceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceId::Raw => write!(f, "raw"),
            TraceId::Gamma(g) => write!(f, "g{g}"),
        }
    }
}

impl Serialize for TraceId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TraceId::Raw => s.serialize_str("raw"),
            TraceId::Gamma(g) => s.serialize_f64(*g),
        }
    }
}

impl<'de> Deserialize<'de> for TraceId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Gamma(f64),
        }
        match Repr::deserialize(d)? {
            Repr::Name(s) if s == "raw" => Ok(TraceId::Raw),
            Repr::Name(s) => Err(serde::de::Error::custom(format!("unknown trace {s:?}"))),
            Repr::Gamma(g) if g >= 0.0 && g.is_finite() => Ok(TraceId::Gamma(g)),
            Repr::Gamma(g) => Err(serde::de::Error::custom(format!("invalid gamma {g}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRecord {
    pub step: u64,
    pub trace: TraceId,
    pub file: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    records: Vec<SnapshotRecord>,
}

/// A directory holding parameter files plus an `index.json` listing them.
#[derive(Debug)]
pub struct SnapshotStore {
    dir: PathBuf,
    index: Index,
}

type Named = Vec<(String, Tensor<f32>)>;

impl SnapshotStore {
    /// Starts an empty store, replacing any existing index in `dir`.
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let store = SnapshotStore {
            dir: dir.to_path_buf(),
            index: Index::default(),
        };
        store.write_index()?;
        Ok(store)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Index = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let store = SnapshotStore {
            dir: dir.to_path_buf(),
            index,
        };
        store.check_order()?;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn records(&self) -> &[SnapshotRecord] {
        &self.index.records
    }

    pub fn is_empty(&self) -> bool {
        self.index.records.is_empty()
    }

    pub fn last_step(&self) -> Option<u64> {
        self.index.records.iter().map(|r| r.step).max()
    }

    fn check_order(&self) -> Result<()> {
        let mut last: BTreeMap<String, u64> = BTreeMap::new();
        for r in &self.index.records {
            let key = r.trace.to_string();
            if let Some(&prev) = last.get(&key) {
                if r.step <= prev {
                    return Err(Error::Store(format!("trace {key}: step {} follows step {prev}", r.step)));
                }
            }
            last.insert(key, r.step);
        }
        Ok(())
    }

    fn write_index(&self) -> Result<()> {
        let path = self.dir.join(INDEX_FILE);
        let tmp = self.dir.join(format!("{INDEX_FILE}.tmp"));
        let text = serde_json::to_string_pretty(&self.index)?;
        std::fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn save<'a>(
        &mut self,
        step: u64,
        trace: TraceId,
        tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
    ) -> Result<&SnapshotRecord> {
        if let Some(prev) = self.index.records.iter().filter(|r| r.trace == trace).map(|r| r.step).max() {
            if step <= prev {
                return Err(Error::Store(format!("trace {trace}: step {step} follows step {prev}")));
            }
        }
        let file = format!("{trace}-{step:08}.bin");
        write_params(&self.dir.join(&file), tensors)?;
        self.index.records.push(SnapshotRecord { step, trace, file });
        self.write_index()?;
        Ok(self.index.records.last().expect("just pushed"))
    }

    pub fn load(&self, record: &SnapshotRecord) -> Result<Named> {
        read_params(&self.dir.join(&record.file))
    }

    /// The raw parameters at the final step ("no EMA").
    pub fn load_raw_final(&self) -> Result<Named> {
        let rec = self
            .index
            .records
            .iter()
            .filter(|r| r.trace == TraceId::Raw)
            .max_by_key(|r| r.step)
            .ok_or_else(|| Error::Store(format!("{}: no raw snapshots", self.dir.display())))?;
        self.load(rec)
    }

    fn ema_records(&self) -> Vec<(&SnapshotRecord, f64)> {
        self.index
            .records
            .iter()
            .filter_map(|r| match r.trace {
                TraceId::Gamma(g) => Some((r, g)),
                TraceId::Raw => None,
            })
            .collect()
    }

    /// Achievable `sigma_rel` range at `n_total` steps (defaults to the last stored step).
    pub fn sigma_rel_range(&self, n_total: Option<u64>) -> Result<(f64, f64)> {
        let n = self.horizon(n_total)?;
        Ok(super::sigma_rel_range(n as usize))
    }

    fn horizon(&self, n_total: Option<u64>) -> Result<u64> {
        let last = self
            .last_step()
            .ok_or_else(|| Error::Store(format!("{}: store is empty", self.dir.display())))?;
        Ok(n_total.unwrap_or(last))
    }

    /// Parameters under the power-law profile with the given `sigma_rel`
    /// after `n_total` steps, combined from the stored EMA snapshots.
    pub fn reconstruct(&self, target_sigma_rel: f64, n_total: Option<u64>) -> Result<(Named, Reconstruction)> {
        let n = self.horizon(n_total)? as usize;
        let records = self.ema_records();
        if records.len() < 2 {
            return Err(Error::Store(format!(
                "{}: need at least two EMA snapshots, found {}",
                self.dir.display(),
                records.len()
            )));
        }
        let gamma = gamma_from_sigma_rel(target_sigma_rel, n)?;
        let target = response_profile(n, gamma).weights;
        let basis: Vec<Vec<f64>> = records
            .iter()
            .map(|&(r, g)| response_profile(r.step as usize, g).padded(n))
            .collect();
        let rec = solve_profile_weights(&basis, &target)?;
        log::debug!("sigma_rel {target_sigma_rel}: gamma {gamma:.4}, residual {:.3e}", rec.residual);

        let mut acc: Option<Vec<(String, Vec<usize>, Vec<f64>)>> = None;
        for (&(r, _), &a) in records.iter().zip(&rec.coefficients) {
            let snap = self.load(r)?;
            let acc = acc.get_or_insert_with(|| {
                snap.iter()
                    .map(|(name, t)| (name.clone(), t.dims().to_vec(), vec![0.0; t.len()]))
                    .collect()
            });
            if acc.len() != snap.len() {
                return Err(Error::Store(format!("{}: tensor count differs", r.file)));
            }
            for ((name, dims, sum), (sname, t)) in acc.iter_mut().zip(&snap) {
                if name != sname || dims.as_slice() != t.dims() {
                    return Err(Error::Store(format!("{}: tensor {sname} does not match {name}", r.file)));
                }
                for (s, &v) in sum.iter_mut().zip(t.data()) {
                    *s += a * v as f64;
                }
            }
        }
        let params = acc
            .expect("at least two records")
            .into_iter()
            .map(|(name, dims, sum)| {
                let data = sum.into_iter().map(|v| v as f32).collect();
                Ok((name, Tensor::from_vec(&dims, data)?))
            })
            .collect::<Result<Named>>()?;
        Ok((params, rec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ema::{sigma_rel, EmaTrace, DEFAULT_GAMMAS};

    #[test]
    fn trace_id_json() {
        assert_eq!(serde_json::to_string(&TraceId::Raw).unwrap(), "\"raw\"");
        assert_eq!(serde_json::to_string(&TraceId::Gamma(6.94)).unwrap(), "6.94");
        assert_eq!(serde_json::from_str::<TraceId>("16.97").unwrap(), TraceId::Gamma(16.97));
        assert!(serde_json::from_str::<TraceId>("\"ema\"").is_err());
        assert!(serde_json::from_str::<TraceId>("-1.0").is_err());
    }

    #[test]
    fn rejects_non_increasing_steps() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = SnapshotStore::create(dir.path()).unwrap();
        let t = Tensor::<f32>::scalar(1.0);
        s.save(4, TraceId::Raw, [("w", &t)]).unwrap();
        assert!(s.save(4, TraceId::Raw, [("w", &t)]).is_err());
        s.save(4, TraceId::Gamma(1.0), [("w", &t)]).unwrap();
        let reopened = SnapshotStore::open(dir.path()).unwrap();
        assert_eq!(reopened.records().len(), 2);
    }

    /// Two scalar parameters following known trajectories, snapshotted
    /// every `every` steps under both default traces.
    fn scalar_store(dir: &Path, n: usize, every: usize, traj: impl Fn(usize) -> [f64; 2]) -> SnapshotStore {
        let mut store = SnapshotStore::create(dir).unwrap();
        let mut traces: Vec<EmaTrace> = DEFAULT_GAMMAS.iter().map(|&g| EmaTrace::powerlaw(g, 2)).collect();
        for i in 1..=n {
            let v = traj(i);
            for tr in &mut traces {
                tr.update(&v).unwrap();
            }
            if i % every == 0 {
                for tr in &traces {
                    let gamma = match tr.kind {
                        crate::ema::EmaKind::PowerLaw { gamma } => gamma,
                        _ => unreachable!(),
                    };
                    let t = Tensor::from_vec(&[2], tr.value.iter().map(|&x| x as f32).collect()).unwrap();
                    store.save(i as u64, TraceId::Gamma(gamma), [("p", &t)]).unwrap();
                }
                let raw = Tensor::from_vec(&[2], v.iter().map(|&x| x as f32).collect()).unwrap();
                store.save(i as u64, TraceId::Raw, [("p", &raw)]).unwrap();
            }
        }
        store
    }

    #[test]
    fn constant_trajectory_is_recovered() {
        let dir = tempfile::tempdir().unwrap();
        let store = scalar_store(dir.path(), 256, 32, |_| [0.75, -2.0]);
        for s in [0.06, 0.1, 0.15] {
            let (p, rec) = store.reconstruct(s, None).unwrap();
            // every snapshot holds the constant, so the output is it times the coefficient sum
            let total: f64 = rec.coefficients.iter().sum();
            assert!((total - 1.0).abs() < 1e-2, "{s}: {total}");
            assert!((p[0].1.data()[0] as f64 - 0.75 * total).abs() < 1e-6);
            assert!((p[0].1.data()[1] as f64 + 2.0 * total).abs() < 1e-6);
        }
        assert_eq!(store.load_raw_final().unwrap()[0].1.data(), &[0.75, -2.0]);
    }

    #[test]
    fn own_profile_returns_that_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let n = 512;
        let store = scalar_store(dir.path(), n, 64, |i| [(i as f64 / 30.0).sin(), i as f64 / 100.0]);
        let s = sigma_rel(n, 6.94);
        let (p, rec) = store.reconstruct(s, None).unwrap();
        let last = store
            .records()
            .iter()
            .find(|r| r.step == n as u64 && r.trace == TraceId::Gamma(6.94))
            .unwrap();
        let want = store.load(last).unwrap();
        for (a, b) in p[0].1.data().iter().zip(want[0].1.data()) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert!(rec.residual < 1e-6);
    }

    #[test]
    fn unreachable_sigma_rel_reports_range() {
        let dir = tempfile::tempdir().unwrap();
        let store = scalar_store(dir.path(), 128, 32, |_| [1.0, 1.0]);
        assert!(matches!(store.reconstruct(0.4, None), Err(Error::Range { .. })));
        let empty = SnapshotStore::create(&dir.path().join("e")).unwrap();
        assert!(empty.reconstruct(0.1, None).is_err());
    }
}
