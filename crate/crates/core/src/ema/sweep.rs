//! Metric sweeps over reconstructed EMA lengths.

use std::io::Write;
use std::path::Path;

use super::SnapshotStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SWEEP_HEADER: &str = "sigma_rel,si_sdr,loss";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepMetrics {
    pub si_sdr: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub struct SweepRow {
    pub sigma_rel: f64,
    pub result: Result<SweepMetrics>,
}

/// Reconstructs the parameters at each `sigma_rel` in `grid` and evaluates
/// them. A failing grid point is recorded in its row and the sweep goes on.
pub fn ema_sweep<F>(store: &SnapshotStore, grid: &[f64], n_total: Option<u64>, mut eval: F) -> Vec<SweepRow>
where
    F: FnMut(&[(String, Tensor<f32>)]) -> Result<SweepMetrics>,
{
    grid.iter()
        .map(|&sigma_rel| {
            let result = store.reconstruct(sigma_rel, n_total).and_then(|(params, _)| eval(&params));
            if let Err(e) = &result {
                log::warn!("sigma_rel {sigma_rel}: {e}");
            }
            SweepRow { sigma_rel, result }
        })
        .collect()
}

/// Failed rows are written with `nan` metrics.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "{SWEEP_HEADER}").map_err(io)?;
    for r in rows {
        match &r.result {
            Ok(m) => writeln!(f, "{},{},{}", r.sigma_rel, m.si_sdr, m.loss),
            Err(_) => writeln!(f, "{},nan,nan", r.sigma_rel),
        }
        .map_err(io)?;
    }
    f.flush().map_err(io)
}
