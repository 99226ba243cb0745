//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::{ParamStore, Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    /// SGD with Nesterov momentum. Weight decay applies to rank ≥ 2 tensors only.
    Sgd { momentum: f64, weight_decay: f64 },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self::Sgd { momentum, weight_decay }
    }

    pub fn adam(beta1: f64) -> Self {
        Self::Adam {
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer with its per-parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    step: u64,
    /// Momentum (SGD) or first moment (Adam).
    m: Vec<Tensor<T>>,
    /// Second moment (Adam only).
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        let v = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            step: 0,
            m: zeros(),
            v,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(TensorError::Shape(format!(
                "optimizer state for {} params, store has {}, got {} grads",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let lr_t = T::from_f64(lr);
        match self.kind {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                let mu = T::from_f64(momentum);
                let wd = T::from_f64(weight_decay);
                for ((p, g), m) in store.iter_mut().zip(grads).zip(self.m.iter_mut()) {
                    let Some(g) = g else { continue };
                    let decay = p.value.shape().len() >= 2;
                    for ((w, &gv), mv) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
                        let d = if decay { gv + wd * *w } else { gv };
                        *mv = mu * *mv + d;
                        *w -= lr_t * (d + mu * *mv);
                    }
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let b1 = T::from_f64(beta1);
                let b2 = T::from_f64(beta2);
                let one = T::one();
                let c1 = T::from_f64(1.0 - beta1.powi(self.step as i32));
                let c2 = T::from_f64(1.0 - beta2.powi(self.step as i32));
                let eps = T::from_f64(eps);
                let wd = T::from_f64(weight_decay);
                for (((p, g), m), v) in store.iter_mut().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
                    let Some(g) = g else { continue };
                    for (((w, &gv), mv), vv) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let d = gv + wd * *w;
                        *mv = b1 * *mv + (one - b1) * d;
                        *vv = b2 * *vv + (one - b2) * d * d;
                        let mh = *mv / c1;
                        let vh = *vv / c2;
                        *w -= lr_t * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// State tensors for checkpointing, in a fixed order.
    pub fn state(&self) -> (u64, Vec<Tensor<T>>) {
        (self.step, self.m.iter().chain(&self.v).cloned().collect())
    }

    pub fn load_state(&mut self, step: u64, tensors: Vec<Tensor<T>>) -> Result<()> {
        let n = self.m.len();
        let expect = n + self.v.len();
        if tensors.len() != expect {
            return Err(TensorError::Shape(format!(
                "optimizer state has {} tensors, expected {expect}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        for slot in self.m.iter_mut().chain(self.v.iter_mut()) {
            let t = it.next().expect("length checked");
            if t.shape() != slot.shape() {
                return Err(TensorError::Shape(format!(
                    "optimizer state shape {:?} vs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        self.step = step;
        Ok(())
    }
}
