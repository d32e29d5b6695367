//! Magnitude-preserving network primitives, the toy denoiser, and the
//! reverse-mode machinery behind them.

mod gradcheck;
mod layers;
mod net;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{force_norm_vector, mp_add, mp_add_tau, normalize_weight, WEIGHT_NORM_EPS};
pub use net::{DenoiserNet, NetConfig};
pub use tape::{sigmoid, Gradients, NodeId, Tape, Tau, MP_SILU_SCALE};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A named learnable (or frozen) tensor.
///
/// Weights with `mp_normalized` set are stored as `[C_out, fan_in]` and
/// renormalized to per-row norm `sqrt(fan_in)` after every optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub fan_in: usize,
    pub mp_normalized: bool,
    pub trainable: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>, mp_normalized: bool, trainable: bool) -> Self {
        let fan_in = if value.dims().len() >= 2 {
            value.len() / value.dims()[0]
        } else {
            value.len()
        };
        Parameter {
            name: name.into(),
            grad: Tensor::zeros(value.dims()),
            value,
            fan_in,
            mp_normalized,
            trainable,
        }
    }

    /// Projects each output-channel row onto the sphere of radius
    /// `sqrt(fan_in)`. No-op for parameters that are not mp-normalized.
    pub fn force_norm(&mut self) {
        if !self.mp_normalized {
            return;
        }
        let k = self.fan_in;
        for row in self.value.data_mut().chunks_mut(k) {
            force_norm_vector(row, k);
        }
    }

    /// Largest relative deviation of a row norm from `sqrt(fan_in)`.
    pub fn norm_deviation(&self) -> f64 {
        let target = (self.fan_in as f64).sqrt();
        self.value
            .data()
            .chunks(self.fan_in)
            .map(|row| {
                let n = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                (n - target).abs() / target
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, p: Parameter<S>) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Parameter<S> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<S> {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn force_norm_all(&mut self) {
        self.params.iter_mut().for_each(Parameter::force_norm);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn max_norm_deviation(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.mp_normalized)
            .map(Parameter::norm_deviation)
            .fold(0.0, f64::max)
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All values concatenated in parameter order, widened to `f64`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for p in &self.params {
            out.extend(p.value.data().iter().map(|v| v.as_f64()));
        }
        out
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_len() {
            return Err(Error::Shape {
                expected: vec![self.total_len()],
                got: vec![flat.len()],
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            for (d, &s) in p.value.data_mut().iter_mut().zip(&flat[off..off + n]) {
                *d = S::lit(s);
            }
            off += n;
        }
        Ok(())
    }

    /// Copies values from `other`, matching by name and shape.
    pub fn load_values<T: Scalar>(&mut self, other: &ParamSet<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other.by_name(&p.name).ok_or_else(|| Error::config(p.name.clone(), "missing from parameter file"))?;
            if src.value.dims() != p.value.dims() {
                return Err(Error::Shape {
                    expected: p.value.dims().to_vec(),
                    got: src.value.dims().to_vec(),
                });
            }
            p.value = src.value.cast();
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    fan_in: p.fan_in,
                    mp_normalized: p.mp_normalized,
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}
