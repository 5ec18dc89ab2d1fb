use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    PlainGd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::PlainGd => "plain_gd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain_gd" | "gd" | "sgd" => Ok(OptimizerKind::PlainGd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected `plain_gd` or `adam`)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-slot optimizer state. Slots are identified by position; callers must present the
/// same parameters in the same order on every step.
#[derive(Debug, Clone)]
pub(crate) struct Optimizer {
    kind: OptimizerKind,
    adam: AdamParams,
    step: i32,
    first: Vec<DMatrix<f64>>,
    second: Vec<DMatrix<f64>>,
}

impl Optimizer {
    pub(crate) fn new(kind: OptimizerKind, adam: AdamParams) -> Self {
        Self { kind, adam, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub(crate) fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates `param` in place from `grad`; `decay` is decoupled weight decay.
    pub(crate) fn update(&mut self, slot: usize, param: &mut DMatrix<f64>, grad: &DMatrix<f64>, lr: f64, decay: f64) {
        match self.kind {
            OptimizerKind::PlainGd => {
                param.zip_apply(grad, |p, g| *p -= lr * g);
            }
            OptimizerKind::Adam => {
                while self.first.len() <= slot {
                    self.first.push(DMatrix::zeros(0, 0));
                    self.second.push(DMatrix::zeros(0, 0));
                }
                if self.first[slot].shape() != grad.shape() {
                    self.first[slot] = DMatrix::zeros(grad.nrows(), grad.ncols());
                    self.second[slot] = DMatrix::zeros(grad.nrows(), grad.ncols());
                }
                let AdamParams { beta1, beta2, eps } = self.adam;
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                let m = &mut self.first[slot];
                let v = &mut self.second[slot];
                for ((p, g), (mi, vi)) in param.iter_mut().zip(grad.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
                    *mi = beta1 * *mi + (1.0 - beta1) * g;
                    *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        if decay > 0.0 {
            *param *= 1.0 - lr * decay;
        }
    }
}
