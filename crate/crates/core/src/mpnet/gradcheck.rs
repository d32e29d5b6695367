use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

use super::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares reverse-mode gradients with central finite differences on
/// `coords` randomly chosen trainable coordinates.
///
/// `objective(params, want_grad)` returns the loss and, when asked, one
/// gradient tensor per parameter. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(params: &ParamSet<f64>, mut objective: F, coords: usize, step: f64, floor: f64, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>, bool) -> Result<(f64, Option<Vec<Tensor<f64>>>)>,
{
    let (_, grads) = objective(params, true)?;
    let grads = grads.expect("objective must return gradients when asked");

    let pool: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(i, p)| (0..p.value.len()).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(usize, usize)> = if pool.len() <= coords {
        pool
    } else {
        rand::seq::index::sample(&mut rng, pool.len(), coords)
            .into_iter()
            .map(|k| pool[k])
            .collect()
    };

    let mut report = GradCheckReport {
        coords_checked: picks.len(),
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = params.clone();
    for (pi, j) in picks {
        let orig = params.get(pi).value.data()[j];
        probe.get_mut(pi).value.data_mut()[j] = orig + step;
        let (up, _) = objective(&probe, false)?;
        probe.get_mut(pi).value.data_mut()[j] = orig - step;
        let (down, _) = objective(&probe, false)?;
        probe.get_mut(pi).value.data_mut()[j] = orig;

        let numeric = (up - down) / (2.0 * step);
        let analytic = grads[pi].data()[j];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((params.get(pi).name.clone(), j, analytic, numeric));
        }
    }
    Ok(report)
}
