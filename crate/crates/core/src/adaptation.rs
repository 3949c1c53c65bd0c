//! Test-time local adaptation: per-example on retrieved neighbours, or once
//! for the whole test set on uniform memory samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, ParameterVector, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::memory::EpisodicMemory;
use crate::models::{self, Batch, KeyNetwork, PredictorParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    PerExample,
    Coarse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Gradient steps `L`.
    pub steps: usize,
    /// Neighbours per query, or samples per coarse step (`K`).
    pub neighbors: usize,
    pub lr: f64,
    /// Proximal coefficient `λ_l`.
    pub lambda: f64,
    pub mode: AdaptMode,
    /// Test-set clusters; only 1 is supported and only read in coarse mode.
    pub clusters: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 30,
            neighbors: 32,
            lr: 0.01,
            lambda: 0.001,
            mode: AdaptMode::PerExample,
            clusters: 1,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            return Err(Error::Config("adapt.neighbors must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("adapt.lr must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("adapt.lambda must be non-negative".into()));
        }
        if self.clusters != 1 {
            return Err(Error::Config("adapt.clusters: only a single cluster is supported".into()));
        }
        Ok(())
    }
}

/// Recorded `mean ℓ(f_θ̃(x), y) + λ‖θ̃ − θ‖²` with `θ` held as a constant anchor.
pub fn adaptation_loss_on_tape<'t>(
    tape: &'t Tape,
    adapted: &[Var<'t>],
    anchor: &[Var<'t>],
    batch: &Batch,
    lambda: f64,
) -> Result<Var<'t>> {
    let mut loss = models::batch_loss_on_tape(tape, adapted, batch)?;
    if lambda != 0.0 {
        let mut prox: Option<Var<'t>> = None;
        for (&p, &a) in adapted.iter().zip(anchor) {
            let term = p.sub(a)?.sq_norm()?;
            prox = Some(match prox {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
        if let Some(prox) = prox {
            loss = loss.add(prox.scale(lambda)?)?;
        }
    }
    Ok(loss)
}

/// Value and gradient of the adaptation objective at `adapted`.
pub fn adaptation_gradient(
    adapted: &ParameterVector,
    anchor: &ParameterVector,
    batch: &Batch,
    lambda: f64,
) -> Result<(f64, ParameterVector)> {
    adapted.check_structure(anchor)?;
    let (mut value, mut grads) = models::loss_and_gradient(adapted, batch)?;
    if lambda != 0.0 {
        let mut prox = 0.0;
        for ((g, p), a) in grads.0.iter_mut().zip(&adapted.0).zip(&anchor.0) {
            for ((g, &p), &a) in g.data_mut().iter_mut().zip(p.data()).zip(a.data()) {
                prox += (p - a) * (p - a);
                *g += 2.0 * lambda * (p - a);
            }
        }
        value += lambda * prox;
    }
    if !value.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite { op: "adaptation gradient" });
    }
    Ok((value, grads))
}

fn descend(theta: &PredictorParams, batches: impl FnMut(usize) -> Result<Batch>, cfg: &AdaptConfig) -> Result<PredictorParams> {
    let mut batches = batches;
    let mut current = theta.params.clone();
    for step in 0..cfg.steps {
        let batch = batches(step)?;
        let (_, g) = adaptation_gradient(&current, &theta.params, &batch, cfg.lambda)?;
        current = autodiff::apply_update(&current, &g, cfg.lr)?;
        if !current.is_finite() {
            return Err(Error::NonFinite { op: "local adaptation" });
        }
    }
    theta.with_params(current)
}

/// `L` gradient steps on the neighbour batch starting from and anchored at `theta`.
pub fn local_adapt(theta: &PredictorParams, neighbors: &Batch, cfg: &AdaptConfig) -> Result<PredictorParams> {
    if neighbors.is_empty() {
        return Err(Error::Empty("neighbour list"));
    }
    descend(theta, |_| Ok(neighbors.clone()), cfg)
}

/// `L` steps, each on `K` fresh uniform samples from memory. The result is
/// shared by every test example.
pub fn coarse_adapt(theta: &PredictorParams, mem: &EpisodicMemory, cfg: &AdaptConfig, rng: &mut impl Rng) -> Result<PredictorParams> {
    if mem.is_empty() {
        return Err(Error::Empty("memory"));
    }
    let d = theta.arch.input_dim;
    descend(
        theta,
        |_| {
            let sample = mem.sample_uniform(cfg.neighbors, rng)?;
            let xs: Vec<&[f64]> = sample.iter().map(|e| e.x.as_slice()).collect();
            let ys: Vec<usize> = sample.iter().map(|e| e.y).collect();
            Batch::new(&xs, &ys, d)
        },
        cfg,
    )
}

/// Batch made of the memory entries at `indices`.
pub fn batch_from_memory(mem: &EpisodicMemory, indices: &[usize], input_dim: usize) -> Result<Batch> {
    let entries = mem.entries();
    let xs: Vec<&[f64]> = indices.iter().map(|&i| entries[i].x.as_slice()).collect();
    let ys: Vec<usize> = indices.iter().map(|&i| entries[i].y).collect();
    Batch::new(&xs, &ys, input_dim)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    /// Memory indices retrieved for each query; empty in coarse mode.
    pub neighbors: Vec<Vec<usize>>,
}

/// Predicts every row of `xs`, adapting according to `cfg.mode`. With an
/// empty memory this is plain prediction.
pub fn predict_with_adaptation<X: AsRef<[f64]>>(
    theta: &PredictorParams,
    mem: &EpisodicMemory,
    keynet: &KeyNetwork,
    xs: &[X],
    cfg: &AdaptConfig,
    rng: &mut impl Rng,
) -> Result<Predictions> {
    let d = theta.arch.input_dim;
    if xs.is_empty() {
        return Ok(Predictions::default());
    }
    if mem.is_empty() {
        tracing::warn!("memory is empty; predicting without adaptation");
        return Ok(Predictions {
            labels: theta.classify(&Tensor::from_rows(xs, d)?)?,
            neighbors: vec![Vec::new(); xs.len()],
        });
    }
    match cfg.mode {
        AdaptMode::Coarse => {
            let adapted = coarse_adapt(theta, mem, cfg, rng)?;
            Ok(Predictions {
                labels: adapted.classify(&Tensor::from_rows(xs, d)?)?,
                neighbors: vec![Vec::new(); xs.len()],
            })
        }
        AdaptMode::PerExample => {
            let mut out = Predictions::default();
            for x in xs {
                let x = x.as_ref();
                let idx = mem.knn_indices(&keynet.encode_key(x)?, cfg.neighbors);
                let adapted = local_adapt(theta, &batch_from_memory(mem, &idx, d)?, cfg)?;
                out.labels.push(adapted.classify(&Tensor::matrix(1, d, x.to_vec())?)?[0]);
                out.neighbors.push(idx);
            }
            Ok(out)
        }
    }
}
