//! Forgetting metrics over a sequence of snapshots.
//!
//! `M[i][t]` is a metric of task `i` (0-based) read from checkpoint `t` (1-based, the model
//! after task `t`). It is defined for `t ≥ i + 1`. Every metric is averaged over the task's
//! associated features before any ratio is taken.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::allocated_capacity;
use crate::reader::Snapshot;
use crate::tasks::{Dataset, TaskSpec};

/// Size of the held-out set drawn per task.
pub const EVAL_SAMPLES: usize = 2000;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("forgetting needs a checkpoint t >= 2, got {0}")]
    TooEarly(usize),
    #[error("checkpoint {t} is past the last checkpoint {last}")]
    MissingCheckpoint { t: usize, last: usize },
    #[error("task {task} has a zero baseline; its ratio is undefined")]
    ZeroBaseline { task: usize },
    #[error("no evaluation dataset for task {0}")]
    MissingDataset(usize),
    #[error("task {0} owns no probes")]
    NoProbes(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// `1 / (1 + MSE)` on the task's held-out set.
    Accuracy,
    /// Mean `|γᵢ|` through the task's own probes.
    Gamma,
    /// Mean `‖φᵢ‖`.
    Norm,
    /// Mean normalized capacity `Ĉᵢ`.
    CapacityNorm,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [MetricKind::Accuracy, MetricKind::Gamma, MetricKind::Norm, MetricKind::CapacityNorm];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Gamma => "gamma",
            MetricKind::Norm => "norm",
            MetricKind::CapacityNorm => "capacity_norm",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown metric `{s}` (expected accuracy, gamma, norm or capacity_norm)"))
    }
}

/// The features attributed to a task: the `count` active features with the largest `|βᵢ|`,
/// ties going to the lower index. With disjoint masks of size `count` this is the mask.
pub fn associated_features(task: &TaskSpec, count: usize) -> Vec<usize> {
    let mut active = task.active_features();
    active.sort_by(|&a, &b| task.beta[b].abs().total_cmp(&task.beta[a].abs()).then(a.cmp(&b)));
    active.truncate(count);
    active.sort_unstable();
    active
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    n_tasks: usize,
    features: Vec<Vec<usize>>,
    // values[kind][task][checkpoint], `None` where undefined
    values: Vec<Vec<Vec<Option<f64>>>>,
}

impl MetricSeries {
    /// Builds a series from raw values for `kind`; used by tests and for reloading.
    pub fn from_values(n_tasks: usize, kind_values: Vec<(MetricKind, Vec<Vec<Option<f64>>>)>) -> Result<Self, MetricsError> {
        let mut values = vec![vec![vec![None; n_tasks + 1]; n_tasks]; MetricKind::ALL.len()];
        for (kind, v) in kind_values {
            if v.len() != n_tasks || v.iter().any(|row| row.len() != n_tasks + 1) {
                return Err(MetricsError::Shape(format!("{kind} values must be {n_tasks} × {}", n_tasks + 1)));
            }
            values[kind.index()] = v;
        }
        Ok(Self { n_tasks, features: vec![Vec::new(); n_tasks], values })
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    /// Feature indices attributed to `task`.
    pub fn features(&self, task: usize) -> &[usize] {
        &self.features[task]
    }

    /// `M[task][checkpoint]`.
    pub fn get(&self, kind: MetricKind, task: usize, checkpoint: usize) -> Option<f64> {
        self.values[kind.index()].get(task)?.get(checkpoint).copied().flatten()
    }

    /// All defined `(task, checkpoint, value)` triples for `kind`, ordered by task then checkpoint.
    pub fn entries(&self, kind: MetricKind) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, row) in self.values[kind.index()].iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    out.push((i, t, *v));
                }
            }
        }
        out
    }
}

/// Mean squared prediction error of each probe in `probes` on `data`, averaged over probes.
fn mse(phi: &DMatrix<f64>, probes: &[&nalgebra::DVector<f64>], data: &Dataset) -> f64 {
    let acts = &data.features * phi.transpose();
    let mut total = 0.0;
    for w in probes {
        let pred = &acts * *w;
        total += (pred - &data.labels).norm_squared() / data.len() as f64;
    }
    total / probes.len() as f64
}

/// Evaluates every metric for every task at every checkpoint after it was trained.
///
/// `snapshots[t]` is checkpoint `t`; `eval[i]` is task `i`'s held-out set; each task is
/// attributed `features_per_task` features.
pub fn compute_metric_series(
    snapshots: &[Snapshot],
    tasks: &[TaskSpec],
    eval: &[Dataset],
    features_per_task: usize,
) -> Result<MetricSeries, MetricsError> {
    let n_tasks = tasks.len();
    if snapshots.len() < n_tasks + 1 {
        return Err(MetricsError::MissingCheckpoint { t: n_tasks, last: snapshots.len().saturating_sub(1) });
    }
    if eval.len() < n_tasks {
        return Err(MetricsError::MissingDataset(eval.len()));
    }
    let features: Vec<Vec<usize>> = tasks.iter().map(|t| associated_features(t, features_per_task)).collect();
    let mut values = vec![vec![vec![None; n_tasks + 1]; n_tasks]; MetricKind::ALL.len()];
    for t in 1..=n_tasks {
        let snap = &snapshots[t];
        let phi = snap.encoder().product();
        let effective = snap.encoder().effective_features();
        if effective.n_features() != tasks[0].n_features() {
            return Err(MetricsError::Shape(format!("snapshot has {} features, tasks have {}", effective.n_features(), tasks[0].n_features())));
        }
        let report = allocated_capacity(&effective);
        for i in 0..t {
            let owned = snap.probes().for_task(i);
            if owned.is_empty() {
                return Err(MetricsError::NoProbes(i));
            }
            let probes: Vec<_> = owned.iter().map(|&p| snap.probes().probes()[p].vector.as_vector()).collect();
            let data = &eval[i];
            if data.n_features() != phi.ncols() {
                return Err(MetricsError::Shape(format!("eval set {i} has {} features", data.n_features())));
            }
            let feats = &features[i];
            let k = feats.len().max(1) as f64;
            let accuracy = 1.0 / (1.0 + mse(&phi, &probes, data));
            let mut gamma = 0.0;
            for w in &probes {
                gamma += feats.iter().map(|&f| phi.column(f).dot(*w).abs()).sum::<f64>() / k;
            }
            gamma /= probes.len() as f64;
            let norm = feats.iter().map(|&f| report.norms[f]).sum::<f64>() / k;
            let cap = feats.iter().map(|&f| report.normalized_capacity[f]).sum::<f64>() / k;
            for (kind, v) in MetricKind::ALL.into_iter().zip([accuracy, gamma, norm, cap]) {
                values[kind.index()][i][t] = Some(v);
            }
        }
    }
    Ok(MetricSeries { n_tasks, features, values })
}

/// Ratio-based forgetting at checkpoint `t` over every earlier task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingScore {
    pub checkpoint: usize,
    /// `R[i] = M[i][t] / M[i][i+1]` for each prior task.
    pub ratios: Vec<f64>,
    /// Mean of `1 − R[i]`.
    pub value: f64,
}

pub fn forgetting(series: &MetricSeries, kind: MetricKind, t: usize) -> Result<ForgettingScore, MetricsError> {
    if t < 2 {
        return Err(MetricsError::TooEarly(t));
    }
    if t > series.n_tasks {
        return Err(MetricsError::MissingCheckpoint { t, last: series.n_tasks });
    }
    let mut ratios = Vec::with_capacity(t - 1);
    for i in 0..t - 1 {
        let base = series.get(kind, i, i + 1).ok_or(MetricsError::MissingCheckpoint { t: i + 1, last: series.n_tasks })?;
        let now = series.get(kind, i, t).ok_or(MetricsError::MissingCheckpoint { t, last: series.n_tasks })?;
        if base == 0.0 {
            return Err(MetricsError::ZeroBaseline { task: i });
        }
        ratios.push(now / base);
    }
    let value = ratios.iter().map(|r| 1.0 - r).sum::<f64>() / ratios.len() as f64;
    Ok(ForgettingScore { checkpoint: t, ratios, value })
}
