//! Full-batch training of the feature reader.
//!
//! A training head is a list of probe indices; output `k` of the head is read by
//! `head[k]` and regressed onto target column `k`. Two losses are supported:
//!
//! * MSE, `½·mean_s Σ_k (ŷ_k − y_k)²` — for `K = 1` this is the single-probe task loss.
//! * Cross-entropy over the softmax of the head's logits.
//!
//! MSE gradients can be computed either from per-sample residuals or from the task's second
//! moments (`Σ`, `mean(f yᵀ)`, `mean(‖y‖²)`); both are exact for the full batch, and the
//! moment route has a per-epoch cost independent of the sample count.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::optim::{AdamParams, Optimizer, OptimizerKind};
use super::{FeatureReader, ReaderError};
use crate::tasks::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::CrossEntropy => "cross_entropy",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(format!("unknown loss `{other}` (expected `mse` or `cross_entropy`)")),
        }
    }
}

/// Whether probes are held fixed or trained together with the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    Fixed,
    Coadapt,
}

impl fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeMode::Fixed => "fixed",
            ProbeMode::Coadapt => "coadapt",
        })
    }
}

impl FromStr for ProbeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(ProbeMode::Fixed),
            "coadapt" => Ok(ProbeMode::Coadapt),
            other => Err(format!("unknown probe mode `{other}` (expected `fixed` or `coadapt`)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Second-moment route (MSE only; cross-entropy always uses samples).
    Moments,
    /// Per-sample residuals.
    Samples,
}

impl FromStr for GradientMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "moments" => Ok(GradientMode::Moments),
            "samples" => Ok(GradientMode::Samples),
            other => Err(format!("unknown gradient mode `{other}` (expected `moments` or `samples`)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Decoupled: `p ← p·(1 − lr·weight_decay)` after each step.
    pub weight_decay: f64,
    pub loss: LossKind,
    pub probe_mode: ProbeMode,
    pub probe_lr: f64,
    pub gradient: GradientMode,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            epochs: 10_000,
            weight_decay: 0.0,
            loss: LossKind::Mse,
            probe_mode: ProbeMode::Fixed,
            probe_lr: 0.01,
            gradient: GradientMode::Moments,
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ReaderError> {
        if self.epochs == 0 {
            return Err(ReaderError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ReaderError::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.probe_lr > 0.0 && self.probe_lr.is_finite()) {
            return Err(ReaderError::InvalidConfig(format!("probe_lr must be positive, got {}", self.probe_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ReaderError::InvalidConfig(format!("weight_decay must be nonnegative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    sigma: DMatrix<f64>,
    cross: DMatrix<f64>,
    target_energy: f64,
}

/// Features (`N × n`) and targets (`N × K`) for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    features: DMatrix<f64>,
    targets: DMatrix<f64>,
    moments: Moments,
}

impl TaskData {
    pub fn new(features: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self, ReaderError> {
        if features.nrows() == 0 || features.nrows() != targets.nrows() {
            return Err(ReaderError::Shape(format!("{} feature rows vs {} target rows", features.nrows(), targets.nrows())));
        }
        let n = features.nrows() as f64;
        let sigma = features.tr_mul(&features) / n;
        let cross = features.tr_mul(&targets) / n;
        let target_energy = targets.norm_squared() / n;
        Ok(Self { features, targets, moments: Moments { sigma, cross, target_energy } })
    }

    /// Regression data where each of `outputs` probes regresses onto the same label.
    pub fn regression(data: &Dataset, outputs: usize) -> Result<Self, ReaderError> {
        let targets = DMatrix::from_fn(data.len(), outputs, |r, _| data.labels[r]);
        Self::new(data.features.clone(), targets)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    pub fn outputs(&self) -> usize {
        self.targets.ncols()
    }
}

/// Loss and full-batch gradients for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// `∂L/∂L_l` for each encoder layer.
    pub layers: Vec<DMatrix<f64>>,
    /// `∂L/∂Φ` on the collapsed product.
    pub phi: DMatrix<f64>,
    /// `∂L/∂w` for each head probe, in head order.
    pub probes: Vec<DVector<f64>>,
}

fn check_head(model: &FeatureReader, head: &[usize], data: &TaskData, loss: LossKind) -> Result<(), ReaderError> {
    if head.is_empty() {
        return Err(ReaderError::Shape("empty head".into()));
    }
    for (k, &p) in head.iter().enumerate() {
        model.probes.get(p)?;
        if head[..k].contains(&p) {
            return Err(ReaderError::DuplicateProbe(p));
        }
    }
    if head.len() != data.outputs() {
        return Err(ReaderError::Shape(format!("head has {} probes but data has {} targets", head.len(), data.outputs())));
    }
    if data.features.ncols() != model.encoder.n_features() {
        return Err(ReaderError::Shape(format!("data has {} features, encoder expects {}", data.features.ncols(), model.encoder.n_features())));
    }
    if loss == LossKind::CrossEntropy && head.len() < 2 {
        return Err(ReaderError::TooFewClasses(head.len()));
    }
    Ok(())
}

fn head_matrix(model: &FeatureReader, head: &[usize]) -> DMatrix<f64> {
    let m = model.encoder.dims();
    let mut w = DMatrix::zeros(m, head.len());
    for (k, &p) in head.iter().enumerate() {
        w.set_column(k, model.probes.probes()[p].vector.as_vector());
    }
    w
}

/// Loss and gradients of `model` on `data` through `head`.
pub fn loss_and_gradients(
    model: &FeatureReader,
    head: &[usize],
    data: &TaskData,
    loss: LossKind,
    mode: GradientMode,
) -> Result<Gradients, ReaderError> {
    check_head(model, head, data, loss)?;
    let layers = model.encoder.layers();
    let depth = layers.len();

    // prefixes[k] = L_k ⋯ L_1 (None = identity); phi = L_d · prefixes[d-1]
    let mut prefixes: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(depth);
    prefixes.push(None);
    for k in 1..depth {
        let next = match &prefixes[k - 1] {
            None => layers[k - 1].clone(),
            Some(p) => &layers[k - 1] * p,
        };
        prefixes.push(Some(next));
    }
    let phi = match &prefixes[depth - 1] {
        None => layers[depth - 1].clone(),
        Some(p) => &layers[depth - 1] * p,
    };
    let w = head_matrix(model, head);

    let (value, d_phi, d_w) = match (loss, mode) {
        (LossKind::Mse, GradientMode::Moments) => {
            let mo = &data.moments;
            let g = phi.tr_mul(&w); // n × K, column k = γ for probe k
            let sg = &mo.sigma * &g;
            let e = &sg - &mo.cross;
            let mut value = 0.5 * mo.target_energy;
            for k in 0..g.ncols() {
                value += 0.5 * g.column(k).dot(&sg.column(k)) - g.column(k).dot(&mo.cross.column(k));
            }
            (value, &w * e.transpose(), &phi * &e)
        }
        (_, _) => {
            let n = data.len() as f64;
            let acts = &data.features * phi.transpose(); // N × m
            let z = &acts * &w; // N × K
            let (value, gz) = match loss {
                LossKind::Mse => {
                    let r = &z - &data.targets;
                    (0.5 * r.norm_squared() / n, r / n)
                }
                LossKind::CrossEntropy => softmax_cross_entropy(&z, &data.targets),
            };
            let h = data.features.tr_mul(&gz); // n × K
            (value, &w * h.transpose(), acts.tr_mul(&gz))
        }
    };

    let layer_grads = if depth == 1 {
        vec![d_phi.clone()]
    } else {
        // suffix_k = L_d ⋯ L_{k+2} (identity for the last layer)
        let mut grads = vec![DMatrix::zeros(0, 0); depth];
        let mut suffix: Option<DMatrix<f64>> = None;
        for k in (0..depth).rev() {
            let left = match &suffix {
                None => d_phi.clone(),
                Some(s) => s.tr_mul(&d_phi),
            };
            grads[k] = match &prefixes[k] {
                None => left,
                Some(p) => left * p.transpose(),
            };
            suffix = Some(match suffix {
                None => layers[k].clone(),
                Some(s) => s * &layers[k],
            });
        }
        grads
    };

    let probes = (0..head.len()).map(|k| d_w.column(k).into_owned()).collect();
    Ok(Gradients { loss: value, layers: layer_grads, phi: d_phi, probes })
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
fn softmax_cross_entropy(z: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let n = z.nrows() as f64;
    let mut grad = DMatrix::zeros(z.nrows(), z.ncols());
    let mut total = 0.0;
    for r in 0..z.nrows() {
        let row = z.row(r);
        let max = row.max();
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let y_sum: f64 = y.row(r).sum();
        for c in 0..z.ncols() {
            let log_p = z[(r, c)] - log_z;
            total -= y[(r, c)] * log_p;
            grad[(r, c)] = (log_p.exp() * y_sum - y[(r, c)]) / n;
        }
    }
    (total / n, grad)
}

/// Per-epoch loss; `losses[e]` is the loss before step `e`, the last entry is after training.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

impl TrainTrace {
    pub fn initial(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Trains `model` in place on one task's full batch. Optimizer state starts fresh.
pub fn train_task(model: &mut FeatureReader, head: &[usize], data: &TaskData, cfg: &TrainConfig) -> Result<TrainTrace, ReaderError> {
    cfg.validate()?;
    check_head(model, head, data, cfg.loss)?;
    let mode = match cfg.loss {
        LossKind::Mse => cfg.gradient,
        LossKind::CrossEntropy => GradientMode::Samples,
    };
    let trainable: Vec<(usize, usize)> = match cfg.probe_mode {
        ProbeMode::Fixed => Vec::new(),
        ProbeMode::Coadapt => head.iter().enumerate().filter(|(_, &p)| !model.probes.probes()[p].fixed).map(|(k, &p)| (k, p)).collect(),
    };
    let depth = model.encoder.depth();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.adam);
    let mut trace = TrainTrace { losses: Vec::with_capacity(cfg.epochs + 1) };

    for epoch in 0..cfg.epochs {
        let grads = loss_and_gradients(model, head, data, cfg.loss, mode)?;
        if !grads.loss.is_finite() {
            return Err(ReaderError::NonFinite { epoch, what: "loss" });
        }
        if !grads.layers.iter().all(all_finite) || !grads.probes.iter().all(|g| g.iter().all(|x| x.is_finite())) {
            return Err(ReaderError::NonFinite { epoch, what: "gradient" });
        }
        trace.losses.push(grads.loss);

        opt.begin_step();
        for (k, (layer, g)) in model.encoder.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
            opt.update(k, layer, g, cfg.learning_rate, cfg.weight_decay);
            if !all_finite(layer) {
                return Err(ReaderError::NonFinite { epoch, what: "encoder weight" });
            }
        }
        for (slot, &(k, p)) in trainable.iter().enumerate() {
            let probe = model.probes.get_mut(p)?;
            let v = probe.vector.as_vector_mut();
            let mut as_matrix = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
            let g = DMatrix::from_column_slice(v.len(), 1, grads.probes[k].as_slice());
            opt.update(depth + slot, &mut as_matrix, &g, cfg.probe_lr, cfg.weight_decay);
            if !all_finite(&as_matrix) {
                return Err(ReaderError::NonFinite { epoch, what: "probe" });
            }
            v.copy_from_slice(as_matrix.as_slice());
        }
    }
    let last = loss_and_gradients(model, head, data, cfg.loss, mode)?;
    if !last.loss.is_finite() {
        return Err(ReaderError::NonFinite { epoch: cfg.epochs, what: "loss" });
    }
    trace.losses.push(last.loss);
    Ok(trace)
}
