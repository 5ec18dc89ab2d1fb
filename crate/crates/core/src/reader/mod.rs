//! The feature-reader model `ŷ = wᵀ Φ f`.
//!
//! `Φ` may be factored through a deep linear encoder `Φ = L_d ⋯ L_1` (no nonlinearities).
//! Probes are readout vectors in activation space; each task owns one or more of them.

pub(crate) mod optim;
mod sequence;
mod train;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{FeatureMatrix, GeometryError, ReadoutVector};
use crate::linalg::chain_product;
use crate::rng::{self, tag};
use crate::tasks::{FeatureStats, TaskError};

pub use optim::{AdamParams, OptimizerKind};
pub use sequence::{initial_model, train_sequence, SequenceConfig, SequenceRun};
pub use train::{loss_and_gradients, train_task, GradientMode, Gradients, LossKind, ProbeMode, TaskData, TrainConfig, TrainTrace};

#[derive(Debug, Error, PartialEq)]
pub enum ReaderError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { epoch: usize, what: &'static str },
    #[error("probe index {0} is not in the bank")]
    UnknownProbe(usize),
    #[error("probe {0} appears more than once in a head")]
    DuplicateProbe(usize),
    #[error("cross-entropy needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// Linear encoder `Φ = L_d ⋯ L_1`; `layers[0]` is applied first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    layers: Vec<DMatrix<f64>>,
}

impl Encoder {
    pub fn new(layers: Vec<DMatrix<f64>>) -> Result<Self, ReaderError> {
        if layers.is_empty() {
            return Err(ReaderError::Shape("encoder needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(ReaderError::Shape(format!(
                    "layer {} is {}x{} but layer {} outputs {} rows",
                    k + 1,
                    pair[1].nrows(),
                    pair[1].ncols(),
                    k,
                    pair[0].nrows()
                )));
            }
        }
        if layers.iter().flat_map(|l| l.iter()).any(|x| !x.is_finite()) {
            return Err(ReaderError::NonFinite { epoch: 0, what: "encoder weight" });
        }
        Ok(Self { layers })
    }

    /// Single-layer encoder holding `Φ` directly.
    pub fn shallow(phi: &FeatureMatrix) -> Self {
        Self { layers: vec![phi.as_matrix().clone()] }
    }

    /// Gaussian init with standard deviation `1/√fan_in`; hidden width `max(m, n)`.
    pub fn random(m: usize, n: usize, depth: usize, seed: u64) -> Result<Self, ReaderError> {
        if depth == 0 || m == 0 || n == 0 {
            return Err(ReaderError::Shape(format!("invalid encoder shape m={m} n={n} depth={depth}")));
        }
        let h = m.max(n);
        let shapes: Vec<(usize, usize)> = (0..depth)
            .map(|l| {
                let rows = if l + 1 == depth { m } else { h };
                let cols = if l == 0 { n } else { h };
                (rows, cols)
            })
            .collect();
        let mut rng = rng::stream(seed, &[tag::ENCODER_INIT, depth as u64]);
        let layers = shapes
            .into_iter()
            .map(|(rows, cols)| {
                let std = 1.0 / (cols as f64).sqrt();
                DMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
            })
            .collect();
        Self::new(layers)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Activation dimensions `m`.
    pub fn dims(&self) -> usize {
        self.layers.last().map_or(0, |l| l.nrows())
    }

    pub fn n_features(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.layers
    }

    /// The collapsed product `Φ`.
    pub fn product(&self) -> DMatrix<f64> {
        chain_product(&self.layers).expect("encoder has at least one layer")
    }

    /// Columns of the product, i.e. the effective feature vectors.
    pub fn effective_features(&self) -> FeatureMatrix {
        FeatureMatrix::new(self.product()).expect("finite encoder has a finite product")
    }

    /// `Φ e_i`, pushed through the layers one at a time.
    pub fn effective_feature(&self, i: usize) -> DVector<f64> {
        let mut e = DVector::zeros(self.n_features());
        e[i] = 1.0;
        self.activation(&e)
    }

    /// `a = L_d ⋯ L_1 f`, applied layer by layer.
    pub fn activation(&self, f: &DVector<f64>) -> DVector<f64> {
        self.layers.iter().fold(f.clone(), |acc, l| l * acc)
    }
}

/// A readout vector with a flag stating whether it may receive gradient updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub vector: ReadoutVector,
    pub fixed: bool,
    pub task: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeBank {
    probes: Vec<Probe>,
}

impl ProbeBank {
    pub fn new(probes: Vec<Probe>) -> Self {
        Self { probes }
    }

    /// `per_task` Gaussian probes per task with entries of variance `1/m`.
    pub fn random(n_tasks: usize, per_task: usize, m: usize, fixed: bool, seed: u64) -> Self {
        let std = 1.0 / (m as f64).sqrt();
        let probes = (0..n_tasks)
            .flat_map(|t| (0..per_task).map(move |k| (t, k)))
            .map(|(t, k)| {
                let mut rng = rng::stream(seed, &[tag::PROBE_INIT, t as u64, k as u64]);
                let v = DVector::from_fn(m, |_, _| std * rng.sample::<f64, _>(StandardNormal));
                Probe { vector: ReadoutVector::new(v).expect("finite"), fixed, task: t }
            })
            .collect();
        Self { probes }
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<&Probe, ReaderError> {
        self.probes.get(i).ok_or(ReaderError::UnknownProbe(i))
    }

    pub(crate) fn get_mut(&mut self, i: usize) -> Result<&mut Probe, ReaderError> {
        self.probes.get_mut(i).ok_or(ReaderError::UnknownProbe(i))
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    pub fn push(&mut self, probe: Probe) -> usize {
        self.probes.push(probe);
        self.probes.len() - 1
    }

    /// Indices of every probe owned by `task`, in bank order.
    pub fn for_task(&self, task: usize) -> Vec<usize> {
        self.probes.iter().enumerate().filter(|(_, p)| p.task == task).map(|(i, _)| i).collect()
    }

    /// Marks every probe of `task` as fixed.
    pub fn freeze_task(&mut self, task: usize) {
        for p in self.probes.iter_mut().filter(|p| p.task == task) {
            p.fixed = true;
        }
    }
}

/// Encoder plus probe bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReader {
    pub encoder: Encoder,
    pub probes: ProbeBank,
}

impl FeatureReader {
    pub fn new(encoder: Encoder, probes: ProbeBank) -> Result<Self, ReaderError> {
        let m = encoder.dims();
        if let Some(p) = probes.probes().iter().find(|p| p.vector.len() != m) {
            return Err(ReaderError::Shape(format!("probe of length {} for {m} activation dims", p.vector.len())));
        }
        Ok(Self { encoder, probes })
    }
}

/// `wᵀ (L_d ⋯ L_1) f`.
pub fn forward(enc: &Encoder, probe: &ReadoutVector, f: &DVector<f64>) -> Result<f64, ReaderError> {
    if f.len() != enc.n_features() {
        return Err(ReaderError::Shape(format!("activation vector of length {} for {} features", f.len(), enc.n_features())));
    }
    if probe.len() != enc.dims() {
        return Err(ReaderError::Shape(format!("probe of length {} for {} dims", probe.len(), enc.dims())));
    }
    Ok(probe.as_vector().dot(&enc.activation(f)))
}

/// Softmax over the logits `w_cᵀ Φ f` of `K ≥ 2` class probes.
pub fn cross_entropy_forward(enc: &Encoder, probes: &[&ReadoutVector], f: &DVector<f64>) -> Result<DVector<f64>, ReaderError> {
    if probes.len() < 2 {
        return Err(ReaderError::TooFewClasses(probes.len()));
    }
    let logits = probes.iter().map(|w| forward(enc, w, f)).collect::<Result<Vec<_>, _>>()?;
    Ok(softmax(&DVector::from_vec(logits)))
}

pub(crate) fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let max = z.max();
    let e = z.map(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Frozen model state after a checkpoint (0 = initialisation, `t` = after task `t`, 1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    checkpoint: usize,
    seed: u64,
    encoder: Encoder,
    probes: ProbeBank,
    stats: Option<FeatureStats>,
}

impl Snapshot {
    pub fn capture(checkpoint: usize, seed: u64, model: &FeatureReader, stats: Option<FeatureStats>) -> Self {
        Self { checkpoint, seed, encoder: model.encoder.clone(), probes: model.probes.clone(), stats }
    }

    pub fn checkpoint(&self) -> usize {
        self.checkpoint
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn probes(&self) -> &ProbeBank {
        &self.probes
    }

    /// Statistics of the task trained just before this checkpoint.
    pub fn stats(&self) -> Option<&FeatureStats> {
        self.stats.as_ref()
    }
}
