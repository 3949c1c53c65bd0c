//! The predictor MLP and the frozen key network.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterVector, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeds;

/// Layer sizes of the predictor: `input → hidden → hidden → classes`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn shapes(&self) -> [Vec<usize>; 6] {
        let Architecture {
            input_dim: d,
            hidden_dim: h,
            num_classes: c,
        } = *self;
        [vec![d, h], vec![1, h], vec![h, h], vec![1, h], vec![h, c], vec![1, c]]
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// A labelled mini-batch: `x` is `rows × input_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new<X: AsRef<[f64]>>(xs: &[X], ys: &[usize], input_dim: usize) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        Ok(Batch {
            x: Tensor::from_rows(xs, input_dim)?,
            y: ys.to_vec(),
        })
    }

    pub fn single(x: &[f64], y: usize) -> Result<Self> {
        Batch::new(&[x], &[y], x.len())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Weights and biases of the predictor network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub arch: Architecture,
    pub params: ParameterVector,
}

impl PredictorParams {
    pub fn zeros(arch: Architecture) -> Self {
        let params = ParameterVector(arch.shapes().iter().map(|s| Tensor::zeros(s)).collect());
        PredictorParams { arch, params }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(arch: Architecture, seed: u64) -> Self {
        let mut rng = seeds::rng(seed, "init");
        let tensors = arch
            .shapes()
            .iter()
            .map(|shape| {
                if shape[0] == 1 {
                    return Tensor::zeros(shape);
                }
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::new(shape.clone(), data).expect("shape matches data")
            })
            .collect();
        let p = PredictorParams {
            arch,
            params: ParameterVector(tensors),
        };
        tracing::debug!(params = arch.num_params(), "initialized predictor");
        p
    }

    pub fn with_params(&self, params: ParameterVector) -> Result<Self> {
        let expected = self.arch.shapes();
        if params.0.len() != expected.len() || params.0.iter().zip(&expected).any(|(t, s)| t.shape() != s.as_slice()) {
            return Err(Error::Structure("parameters do not fit the architecture".into()));
        }
        Ok(PredictorParams {
            arch: self.arch,
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2()?;
        if d != self.arch.input_dim {
            return Err(Error::Dimension {
                expected: self.arch.input_dim,
                got: d,
            });
        }
        Ok(())
    }

    /// Row-wise log-probabilities for a `rows × input_dim` matrix.
    pub fn log_probs(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let p = self.params.tensors();
        let h1 = x.matmul(&p[0])?.add_row(&p[1])?.tanh();
        let h2 = h1.matmul(&p[2])?.add_row(&p[3])?.tanh();
        h2.matmul(&p[4])?.add_row(&p[5])?.log_softmax()?.checked("log_softmax")
    }

    /// Log-probabilities over all classes for one input.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_probs(&Tensor::matrix(1, x.len(), x.to_vec())?)?.into_data())
    }

    /// Most likely class for each row; ties go to the lower class id.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        let lp = self.log_probs(x)?;
        let (m, _) = lp.dims2()?;
        Ok((0..m).map(|i| argmax(lp.row(i))).collect())
    }

    /// Negative log-likelihood of `y` for one input.
    pub fn task_loss(&self, x: &[f64], y: usize) -> Result<f64> {
        self.batch_loss(&Batch::single(x, y)?)
    }

    /// Mean negative log-likelihood over a batch.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        Ok(self.log_probs(&batch.x)?.nll(&batch.y)?.item())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: "memloom-checkpoint-v1".into(),
            arch: self.arch,
            shapes: self.params.tensors().iter().map(|t| t.shape().to_vec()).collect(),
            params: self.params.flatten(),
        };
        fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        let template = PredictorParams::zeros(ckpt.arch);
        let params = template.params.unflatten_like(&ckpt.params)?;
        template.with_params(params)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    arch: Architecture,
    shapes: Vec<Vec<usize>>,
    params: Vec<f64>,
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Recorded forward pass; `params` are the six predictor tensors on `tape`.
pub fn log_probs_on_tape<'t>(params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
    let h1 = x.matmul(params[0])?.add_row(params[1])?.tanh()?;
    let h2 = h1.matmul(params[2])?.add_row(params[3])?.tanh()?;
    h2.matmul(params[4])?.add_row(params[5])?.log_softmax()
}

/// Recorded mean negative log-likelihood of `batch`.
pub fn batch_loss_on_tape<'t>(tape: &'t Tape, params: &[Var<'t>], batch: &Batch) -> Result<Var<'t>> {
    let x = tape.constant(batch.x.clone());
    log_probs_on_tape(params, x)?.nll(&batch.y)
}

/// Mean NLL of `batch` and its gradient, by hand-written backprop through
/// the two tanh layers. Gives the same values as the recorded pass up to
/// rounding, without building a tape.
pub fn loss_and_gradient(params: &ParameterVector, batch: &Batch) -> Result<(f64, ParameterVector)> {
    let p = params.tensors();
    if p.len() != 6 {
        return Err(Error::Structure(format!("expected 6 predictor tensors, got {}", p.len())));
    }
    let (d, h) = p[0].dims2()?;
    let (h2, c) = p[4].dims2()?;
    let (rows, dx) = batch.x.dims2()?;
    if dx != d || h2 != h || p[2].dims2()? != (h, h) || batch.y.len() != rows || rows == 0 {
        return Err(Error::Shape {
            op: "loss_and_gradient",
            detail: format!("batch {:?} vs first layer {:?}", batch.x.shape(), p[0].shape()),
        });
    }
    let x = batch.x.data();
    let (w1, b1, w2, b2, w3, b3) = (p[0].data(), p[1].data(), p[2].data(), p[3].data(), p[4].data(), p[5].data());

    // forward: dense(a, w, b) for every row
    fn dense(a: &[f64], w: &[f64], b: &[f64], rows: usize, n_in: usize, n_out: usize) -> Vec<f64> {
        let mut z = Vec::with_capacity(rows * n_out);
        for r in 0..rows {
            z.extend_from_slice(b);
            let out = &mut z[r * n_out..];
            for (i, &av) in a[r * n_in..(r + 1) * n_in].iter().enumerate() {
                for (o, &wv) in out.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                    *o += av * wv;
                }
            }
        }
        z
    }
    // tanh through one exp; within a few ulps of f64::tanh and about twice as fast
    fn tanh(v: f64) -> f64 {
        let e = (-2.0 * v.abs()).exp();
        ((1.0 - e) / (1.0 + e)).copysign(v)
    }
    let a1: Vec<f64> = dense(x, w1, b1, rows, d, h).into_iter().map(tanh).collect();
    let a2: Vec<f64> = dense(&a1, w2, b2, rows, h, h).into_iter().map(tanh).collect();
    let mut dz3 = dense(&a2, w3, b3, rows, h, c);

    let inv = 1.0 / rows as f64;
    let mut loss = 0.0;
    for (r, &y) in batch.y.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        let row = &mut dz3[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        loss -= (row[y] / total).ln();
        for v in row.iter_mut() {
            *v *= inv / total;
        }
        row[y] -= inv;
    }
    loss *= inv;

    // backward: weight grads are aᵀ·dz, bias grads column sums, input grads dz·wᵀ
    fn weight_grads(a: &[f64], dz: &[f64], rows: usize, n_in: usize, n_out: usize) -> (Vec<f64>, Vec<f64>) {
        let mut dw = vec![0.0; n_in * n_out];
        let mut db = vec![0.0; n_out];
        for r in 0..rows {
            let g = &dz[r * n_out..(r + 1) * n_out];
            for (b, &gv) in db.iter_mut().zip(g) {
                *b += gv;
            }
            for (i, &av) in a[r * n_in..(r + 1) * n_in].iter().enumerate() {
                for (o, &gv) in dw[i * n_out..(i + 1) * n_out].iter_mut().zip(g) {
                    *o += av * gv;
                }
            }
        }
        (dw, db)
    }
    fn through_tanh(dz: &[f64], w: &[f64], a: &[f64], rows: usize, n_in: usize, n_out: usize) -> Vec<f64> {
        let mut wt = vec![0.0; n_in * n_out];
        for i in 0..n_in {
            for j in 0..n_out {
                wt[j * n_in + i] = w[i * n_out + j];
            }
        }
        let mut out = vec![0.0; rows * n_in];
        for r in 0..rows {
            let o = &mut out[r * n_in..(r + 1) * n_in];
            for (j, &gv) in dz[r * n_out..(r + 1) * n_out].iter().enumerate() {
                for (o, &wv) in o.iter_mut().zip(&wt[j * n_in..(j + 1) * n_in]) {
                    *o += gv * wv;
                }
            }
            for (o, &av) in o.iter_mut().zip(&a[r * n_in..(r + 1) * n_in]) {
                *o *= 1.0 - av * av;
            }
        }
        out
    }
    let (dw3, db3) = weight_grads(&a2, &dz3, rows, h, c);
    let dz2 = through_tanh(&dz3, w3, &a2, rows, h, c);
    let (dw2, db2) = weight_grads(&a1, &dz2, rows, h, h);
    let dz1 = through_tanh(&dz2, w2, &a1, rows, h, h);
    let (dw1, db1) = weight_grads(x, &dz1, rows, d, h);

    let grads = [dw1, db1, dw2, db2, dw3, db3]
        .into_iter()
        .zip(p)
        .map(|(g, t)| Tensor::new(t.shape().to_vec(), g))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, ParameterVector(grads)))
}

/// Frozen random projection used to key the episodic memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyNetwork {
    input_dim: usize,
    key_dim: usize,
    seed: u64,
    normalize: bool,
    /// `input_dim × key_dim` orthogonalized Gaussian matrix.
    projection: Tensor,
}

impl KeyNetwork {
    pub fn new(input_dim: usize, key_dim: usize, seed: u64, normalize: bool) -> Self {
        let mut rng = seeds::rng(seed, "keynet");
        let gaussian: Vec<Vec<f64>> = (0..input_dim)
            .map(|_| (0..key_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let data = if key_dim >= input_dim {
            // orthonormal rows: an isometry from input space into key space
            gram_schmidt(gaussian).into_iter().flatten().collect()
        } else {
            let cols: Vec<Vec<f64>> = (0..key_dim).map(|j| gaussian.iter().map(|r| r[j]).collect()).collect();
            let scale = (input_dim as f64 / key_dim as f64).sqrt();
            let q = gram_schmidt(cols);
            (0..input_dim)
                .flat_map(|i| q.iter().map(move |c| c[i] * scale).collect::<Vec<_>>())
                .collect()
        };
        KeyNetwork {
            input_dim,
            key_dim,
            seed,
            normalize,
            projection: Tensor::matrix(input_dim, key_dim, data).expect("shape matches data"),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn encode_key(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut key = Tensor::matrix(1, x.len(), x.to_vec())?.matmul(&self.projection)?.into_data();
        if self.normalize {
            let norm = key.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                key.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(key)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Orthonormalizes `vectors` in order (modified Gram-Schmidt).
fn gram_schmidt(mut vectors: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for i in 0..vectors.len() {
        for j in 0..i {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let (done, rest) = vectors.split_at_mut(i);
            for (v, u) in rest[0].iter_mut().zip(&done[j]) {
                *v -= dot * u;
            }
        }
        let norm = vectors[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        vectors[i].iter_mut().for_each(|v| *v /= norm);
    }
    vectors
}
