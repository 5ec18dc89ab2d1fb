use serde::{Deserialize, Serialize};

use super::train::{train_task, ProbeMode, TaskData, TrainConfig, TrainTrace};
use super::{Encoder, FeatureReader, ProbeBank, ReaderError, Snapshot};
use crate::tasks::{estimate_stats, make_task_sequence, sample_dataset, Scenario, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub scenario: Scenario,
    pub n_features: usize,
    pub m_dims: usize,
    pub n_tasks: usize,
    pub n_samples: usize,
    pub sparsity: f64,
    pub seed: u64,
    pub depth: usize,
    pub probes_per_task: usize,
    pub train: TrainConfig,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Full,
            n_features: 80,
            m_dims: 20,
            n_tasks: 5,
            n_samples: 20_000,
            sparsity: 0.9,
            seed: 0,
            depth: 1,
            probes_per_task: 1,
            train: TrainConfig::default(),
        }
    }
}

/// Result of one sequential run. `snapshots[0]` is the initial model; `snapshots[t]` follows task `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRun {
    pub tasks: Vec<TaskSpec>,
    pub snapshots: Vec<Snapshot>,
    pub traces: Vec<TrainTrace>,
}

/// Builds the initial model for `cfg`.
pub fn initial_model(cfg: &SequenceConfig) -> Result<FeatureReader, ReaderError> {
    if cfg.probes_per_task == 0 {
        return Err(ReaderError::InvalidConfig("probes_per_task must be at least 1".into()));
    }
    if cfg.depth == 0 {
        return Err(ReaderError::InvalidConfig("depth must be at least 1".into()));
    }
    let encoder = Encoder::random(cfg.m_dims, cfg.n_features, cfg.depth, cfg.seed)?;
    let fixed = cfg.train.probe_mode == ProbeMode::Fixed;
    let probes = ProbeBank::random(cfg.n_tasks, cfg.probes_per_task, cfg.m_dims, fixed, cfg.seed);
    FeatureReader::new(encoder, probes)
}

/// Trains one model on every task in order, snapshotting after each.
pub fn train_sequence(cfg: &SequenceConfig) -> Result<SequenceRun, ReaderError> {
    cfg.train.validate()?;
    if cfg.train.loss != super::LossKind::Mse {
        return Err(ReaderError::InvalidConfig("task sequences are regression tasks and need the mse loss".into()));
    }
    let tasks = make_task_sequence(cfg.scenario, cfg.n_tasks, cfg.n_features, cfg.seed)?;
    let mut model = initial_model(cfg)?;
    let mut snapshots = vec![Snapshot::capture(0, cfg.seed, &model, None)];
    let mut traces = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let ds = sample_dataset(task, cfg.n_samples, cfg.sparsity, cfg.seed)?;
        let head = model.probes.for_task(task.task_index);
        let data = TaskData::regression(&ds, head.len())?;
        traces.push(train_task(&mut model, &head, &data, &cfg.train)?);
        model.probes.freeze_task(task.task_index);
        snapshots.push(Snapshot::capture(task.task_index + 1, cfg.seed, &model, Some(estimate_stats(&ds)?)));
    }
    Ok(SequenceRun { tasks, snapshots, traces })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scenario: Scenario) -> SequenceConfig {
        SequenceConfig {
            scenario,
            n_features: 12,
            m_dims: 6,
            n_tasks: 3,
            n_samples: 300,
            train: TrainConfig { epochs: 50, ..TrainConfig::default() },
            ..SequenceConfig::default()
        }
    }

    #[test]
    fn snapshot_count_is_tasks_plus_one() {
        let run = train_sequence(&small(Scenario::Full)).unwrap();
        assert_eq!(run.snapshots.len(), 4);
        assert_eq!(run.traces.len(), 3);
        assert!(run.snapshots[0].stats().is_none());
        for (t, s) in run.snapshots.iter().enumerate() {
            assert_eq!(s.checkpoint(), t);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = small(Scenario::Disjoint);
        assert_eq!(train_sequence(&cfg).unwrap(), train_sequence(&cfg).unwrap());
    }

    #[test]
    fn rejects_cross_entropy() {
        let mut cfg = small(Scenario::Full);
        cfg.train.loss = super::super::LossKind::CrossEntropy;
        assert!(matches!(train_sequence(&cfg), Err(ReaderError::InvalidConfig(_))));
    }

    #[test]
    fn coadapted_probes_frozen_after_their_task() {
        let mut cfg = small(Scenario::Full);
        cfg.train.probe_mode = ProbeMode::Coadapt;
        let run = train_sequence(&cfg).unwrap();
        let p1 = run.snapshots[1].probes().get(0).unwrap().clone();
        assert!(p1.fixed);
        assert_eq!(run.snapshots[3].probes().get(0).unwrap(), &p1);
        assert_ne!(run.snapshots[0].probes().get(0).unwrap().vector, p1.vector);
    }
}
