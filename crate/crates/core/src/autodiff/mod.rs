//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] records one computation. [`Tape::grad`] walks it backwards
//! using rules that are themselves recorded ops, which is what makes
//! differentiating through a gradient step possible.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered list of parameter tensors treated as one flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector(pub Vec<Tensor>);

impl ParameterVector {
    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn num_params(&self) -> usize {
        self.0.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Rebuilds a vector with this structure from flat values.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Structure(format!(
                "expected {} values, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let tensors = self
            .0
            .iter()
            .map(|t| {
                let chunk = flat[offset..offset + t.len()].to_vec();
                offset += t.len();
                Tensor::new(t.shape().to_vec(), chunk)
            })
            .collect::<Result<_>>()?;
        Ok(ParameterVector(tensors))
    }

    pub fn check_structure(&self, other: &ParameterVector) -> Result<()> {
        if self.0.len() != other.0.len() || self.0.iter().zip(&other.0).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Structure(format!(
                "{:?} vs {:?}",
                self.0.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>(),
                other.0.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// `‖self − other‖₂`.
    pub fn distance(&self, other: &ParameterVector) -> Result<f64> {
        self.check_structure(other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

/// Plain gradient step `params − lr·grads`.
pub fn apply_update(params: &ParameterVector, grads: &ParameterVector, lr: f64) -> Result<ParameterVector> {
    params.check_structure(grads)?;
    let tensors = params
        .0
        .iter()
        .zip(&grads.0)
        .map(|(p, g)| p.sub(&g.scale(lr)))
        .collect::<Result<_>>()?;
    Ok(ParameterVector(tensors))
}

/// Recorded gradient step; the result stays differentiable with respect to
/// `params` (and to `grads` when they were produced with `create_graph`).
pub fn apply_update_on_tape<'t>(params: &[Var<'t>], grads: &[Var<'t>], lr: f64) -> Result<Vec<Var<'t>>> {
    if params.len() != grads.len() {
        return Err(Error::Structure(format!("{} params vs {} grads", params.len(), grads.len())));
    }
    params
        .iter()
        .zip(grads)
        .map(|(&p, &g)| p.sub(g.scale(lr)?))
        .collect()
}

/// Places every tensor of `params` on `tape` as a leaf.
pub fn leaves<'t>(tape: &'t Tape, params: &ParameterVector) -> Vec<Var<'t>> {
    params.0.iter().map(|t| tape.leaf(t.clone())).collect()
}

/// Detached copies of recorded values.
pub fn values_of(vars: &[Var<'_>]) -> ParameterVector {
    ParameterVector(vars.iter().map(|v| (*v.value()).clone()).collect())
}
