//! First-order optimizers with a functional update style: parameters go in,
//! new parameter tensors come out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam (or plain gradient descent) over a fixed list of parameter tensors.
/// Weight decay is the coupled L2 form: `g ← g + wd·θ`.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    weight_decay: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr: T::lit(lr),
            weight_decay: T::lit(weight_decay),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr, weight_decay)
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Returns updated copies of `params`.
    pub fn step(&mut self, params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::Contract("parameter list changed between steps".into()));
        }
        self.step += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.step);
        let bc2 = one - self.beta2.powi(self.step);

        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.same_shape(g, "optimizer")?;
            let mut data = p.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in data.iter_mut().zip(g.data()).enumerate() {
                let gk = gk + self.weight_decay * *w;
                match self.kind {
                    OptimizerKind::Sgd => *w -= self.lr * gk,
                    OptimizerKind::Adam => {
                        m[k] = self.beta1 * m[k] + (one - self.beta1) * gk;
                        v[k] = self.beta2 * v[k] + (one - self.beta2) * gk * gk;
                        let mhat = m[k] / bc1;
                        let vhat = v[k] / bc2;
                        *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
            out.push(Tensor::new(p.rows(), p.cols(), data)?);
        }
        Ok(out)
    }
}
