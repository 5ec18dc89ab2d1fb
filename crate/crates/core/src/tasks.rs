//! Synthetic continual-learning tasks.
//!
//! Each task owns a contribution vector `β` and a mask of features allowed to fire. Samples
//! draw every feature independently: zero with probability `sparsity`, otherwise uniform on
//! `[0, 1)`, then features outside the task's mask are zeroed. Labels are exactly linear,
//! `y = βᵀf`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, tag};

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("n_features ({n_features}) is not divisible by n_tasks ({n_tasks})")]
    IndivisiblePartition { n_features: usize, n_tasks: usize },
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("sparsity must lie in [0, 1), got {0}")]
    InvalidSparsity(f64),
    #[error("sample list is empty")]
    NoSamples,
    #[error("sample {index} has {actual} features, expected {expected}")]
    RaggedSamples { index: usize, expected: usize, actual: usize },
}

/// How tasks share features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Every task activates every feature; only `β` changes between tasks.
    Full,
    /// Tasks own pairwise-disjoint contiguous blocks of features.
    #[serde(rename = "none")]
    Disjoint,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Full => "full",
            Scenario::Disjoint => "none",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Scenario::Full),
            "none" => Ok(Scenario::Disjoint),
            other => Err(format!("unknown scenario `{other}` (expected `full` or `none`)")),
        }
    }
}

/// One task of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_index: usize,
    pub beta: DVector<f64>,
    pub active_mask: Vec<bool>,
}

impl TaskSpec {
    pub fn n_features(&self) -> usize {
        self.beta.len()
    }

    pub fn active_features(&self) -> Vec<usize> {
        self.active_mask.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
    }

    /// Ground-truth label for one activation vector.
    pub fn label(&self, f: &DVector<f64>) -> f64 {
        self.beta.dot(f)
    }
}

/// Builds the task sequence for a scenario. `β` entries are i.i.d. standard normal on the
/// task's mask and zero elsewhere.
pub fn make_task_sequence(scenario: Scenario, n_tasks: usize, n_features: usize, seed: u64) -> Result<Vec<TaskSpec>, TaskError> {
    if n_tasks == 0 {
        return Err(TaskError::ZeroCount("n_tasks"));
    }
    if n_features == 0 {
        return Err(TaskError::ZeroCount("n_features"));
    }
    if scenario == Scenario::Disjoint && !n_features.is_multiple_of(n_tasks) {
        return Err(TaskError::IndivisiblePartition { n_features, n_tasks });
    }
    let block = n_features / n_tasks;
    Ok((0..n_tasks)
        .map(|t| {
            let active_mask: Vec<bool> = match scenario {
                Scenario::Full => vec![true; n_features],
                Scenario::Disjoint => (0..n_features).map(|i| i / block == t).collect(),
            };
            let mut rng = rng::stream(seed, &[tag::TASK_BETA, t as u64]);
            let beta = DVector::from_iterator(
                n_features,
                active_mask.iter().map(|&a| {
                    let z: f64 = rng.sample(StandardNormal);
                    if a {
                        z
                    } else {
                        0.0
                    }
                }),
            );
            TaskSpec { task_index: t, beta, active_mask }
        })
        .collect())
}

/// A single draw `(f, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSample {
    pub f: DVector<f64>,
    pub y: f64,
}

/// A task dataset stored row-wise: `features` is `N × n`, `labels` has length `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn sample(&self, i: usize) -> ActivationSample {
        ActivationSample { f: self.features.row(i).transpose(), y: self.labels[i] }
    }

    pub fn from_samples(samples: &[ActivationSample]) -> Result<Self, TaskError> {
        let first = samples.first().ok_or(TaskError::NoSamples)?;
        let n = first.f.len();
        if let Some((index, s)) = samples.iter().enumerate().find(|(_, s)| s.f.len() != n) {
            return Err(TaskError::RaggedSamples { index, expected: n, actual: s.f.len() });
        }
        let features = DMatrix::from_fn(samples.len(), n, |r, c| samples[r].f[c]);
        let labels = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.y));
        Ok(Self { features, labels })
    }

    /// The same rows with labels multiplied by `scale`.
    pub fn with_label_scale(&self, scale: f64) -> Dataset {
        Dataset { features: self.features.clone(), labels: &self.labels * scale }
    }
}

/// Draws `n_samples` activations for `task` from a fresh stream keyed by `seed`.
pub fn sample_dataset(task: &TaskSpec, n_samples: usize, sparsity: f64, seed: u64) -> Result<Dataset, TaskError> {
    if n_samples == 0 {
        return Err(TaskError::ZeroCount("n_samples"));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(TaskError::InvalidSparsity(sparsity));
    }
    draw(task, n_samples, sparsity, rng::stream(seed, &[tag::TRAIN_DATA, task.task_index as u64]))
}

/// Held-out draws for `task`, from a stream independent of the training data.
pub fn sample_eval_dataset(task: &TaskSpec, n_samples: usize, sparsity: f64, seed: u64) -> Result<Dataset, TaskError> {
    if n_samples == 0 {
        return Err(TaskError::ZeroCount("n_samples"));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(TaskError::InvalidSparsity(sparsity));
    }
    draw(task, n_samples, sparsity, rng::stream(seed, &[tag::EVAL_DATA, task.task_index as u64]))
}

fn draw(task: &TaskSpec, n_samples: usize, sparsity: f64, mut rng: rng::Rng) -> Result<Dataset, TaskError> {
    let n = task.n_features();
    let mut features = DMatrix::zeros(n_samples, n);
    for r in 0..n_samples {
        for c in 0..n {
            // both draws are always taken so the stream layout is mask-independent
            let gate: f64 = rng.gen();
            let value: f64 = rng.gen();
            if gate >= sparsity && task.active_mask[c] {
                features[(r, c)] = value;
            }
        }
    }
    let labels = &features * &task.beta;
    Ok(Dataset { features, labels })
}

/// Empirical second moments of one task's dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    /// `Σ_ij = mean(f_i f_j)`.
    pub sigma: DMatrix<f64>,
    /// `β̂_i = mean(y f_i)`.
    pub beta_hat: DVector<f64>,
    /// `mean(y²)`.
    pub label_second_moment: f64,
    pub sample_count: usize,
}

impl FeatureStats {
    pub fn n_features(&self) -> usize {
        self.beta_hat.len()
    }

    /// Stats of the same data with labels multiplied by `scale`.
    pub fn with_label_scale(&self, scale: f64) -> FeatureStats {
        FeatureStats {
            sigma: self.sigma.clone(),
            beta_hat: &self.beta_hat * scale,
            label_second_moment: self.label_second_moment * scale * scale,
            sample_count: self.sample_count,
        }
    }
}

/// Exact sample means over the dataset.
pub fn estimate_stats(data: &Dataset) -> Result<FeatureStats, TaskError> {
    if data.is_empty() {
        return Err(TaskError::NoSamples);
    }
    let n_samples = data.len() as f64;
    let mut sigma = data.features.tr_mul(&data.features) / n_samples;
    // exact symmetry regardless of the product kernel
    for i in 0..sigma.nrows() {
        for j in (i + 1)..sigma.ncols() {
            let v = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    let beta_hat = data.features.tr_mul(&data.labels) / n_samples;
    let label_second_moment = data.labels.norm_squared() / n_samples;
    Ok(FeatureStats { sigma, beta_hat, label_second_moment, sample_count: data.len() })
}

/// [`estimate_stats`] on a list of samples.
pub fn estimate_stats_from_samples(samples: &[ActivationSample]) -> Result<FeatureStats, TaskError> {
    estimate_stats(&Dataset::from_samples(samples)?)
}
