use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterVector, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &ParameterVector, grads: &ParameterVector) -> Result<ParameterVector> {
        if params.0.len() != grads.0.len() {
            return Err(Error::Structure("adam: gradient count differs from parameter count".into()));
        }
        if self.m.is_empty() {
            self.m = params.0.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut out = Vec::with_capacity(params.0.len());
        for (i, (p, g)) in params.0.iter().zip(&grads.0).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Structure(format!("adam: {:?} vs {:?}", p.shape(), g.shape())));
            }
            let mut data = p.data().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (&gj, w)) in g.data().iter().zip(data.iter_mut()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            out.push(Tensor::new(p.shape().to_vec(), data)?);
        }
        Ok(ParameterVector(out))
    }
}
