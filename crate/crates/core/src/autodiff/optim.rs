use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent with decoupled weight decay.
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

/// Update rule plus per-parameter moment accumulators.
///
/// Weight decay is decoupled in both modes:
/// `w <- w - lr * (update + weight_decay * w)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub const DEFAULT_LR: f64 = 2e-4;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        Self::with_kind(OptimizerKind::Sgd, lr, weight_decay)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self::with_kind(
            OptimizerKind::AdamW {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay,
        )
    }

    pub fn with_kind(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter and clears its gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for (name, t) in params.tensors_mut() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        if self.first.is_empty() {
            self.first = params
                .iter()
                .map(|(_, _, t)| vec![0.0; t.numel()])
                .collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::invalid(
                "optimizer state was built for a different parameter store",
            ));
        }
        self.step += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        let step = self.step as i32;
        for (idx, (_, t)) in params.tensors_mut().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let grad = t.take_grad().expect("checked above");
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            if m.len() != grad.len() {
                return Err(Error::invalid(
                    "optimizer moments do not match parameter shape",
                ));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in t.data_mut().iter_mut().zip(&grad) {
                        *w -= lr * (g + wd * *w);
                    }
                }
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(step);
                    let bc2 = 1.0 - beta2.powi(step);
                    for (((w, g), mi), vi) in t
                        .data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
                    }
                }
            }
        }
        Ok(())
    }
}
