use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::manifest::RunManifest;
use super::table::{aggregate, metric_rows, write_rows, write_summary, CsvRow};
use super::{ExperimentConfig, ExperimentError};
use crate::exec::Execution;
use crate::metrics::{compute_metric_series, MetricSeries};
use crate::reader::{train_sequence, SequenceConfig, SequenceRun, Snapshot};
use crate::tasks::{sample_eval_dataset, Dataset, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub depth: usize,
    pub probes: usize,
}

/// One `(sweep point, seed)` job.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub point: SweepPoint,
    pub run: SequenceRun,
    pub series: MetricSeries,
    pub rows: Vec<CsvRow>,
    pub seconds: f64,
}

impl RunRecord {
    pub fn label(&self) -> String {
        format!("{}_d{}_p{}_s{}", self.rows.first().map_or("run".into(), |r| r.scenario.to_string()), self.point.depth, self.point.probes, self.seed)
    }
}

/// Snapshots of one job as persisted on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedRun {
    pub sequence: SequenceConfig,
    pub tasks: Vec<TaskSpec>,
    pub snapshots: Vec<Snapshot>,
}

fn run_one(cfg: &ExperimentConfig, point: SweepPoint, seed: u64) -> Result<RunRecord, ExperimentError> {
    let start = Instant::now();
    let seq = cfg.sequence_config(seed, point.depth, point.probes);
    let run = train_sequence(&seq).map_err(|e| ExperimentError::Runtime(format!("seed {seed}, depth {}: {e}", point.depth)))?;
    let eval: Vec<Dataset> = run
        .tasks
        .iter()
        .map(|t| sample_eval_dataset(t, cfg.eval_samples, cfg.sparsity, seed))
        .collect::<Result<_, _>>()
        .map_err(ExperimentError::runtime)?;
    let series = compute_metric_series(&run.snapshots, &run.tasks, &eval, cfg.features_per_task()).map_err(ExperimentError::runtime)?;
    let rows = metric_rows(cfg.scenario, seed, point.depth, point.probes, &series);
    Ok(RunRecord { seed, point, run, series, rows, seconds: start.elapsed().as_secs_f64() })
}

/// Every `(point, seed)` pair as an independent job, points outermost.
pub fn run_points(cfg: &ExperimentConfig, points: &[SweepPoint], exec: Execution) -> Result<Vec<RunRecord>, ExperimentError> {
    cfg.validate()?;
    let jobs: Vec<(SweepPoint, u64)> = points.iter().flat_map(|&p| cfg.seeds.iter().map(move |&s| (p, s))).collect();
    exec.map(&jobs, |&(p, s)| run_one(cfg, p, s)).into_iter().collect()
}

pub fn run_scenario(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<RunRecord>, ExperimentError> {
    run_points(cfg, &[SweepPoint { depth: cfg.depth, probes: cfg.probes_per_task }], exec)
}

pub fn run_depth_sweep(cfg: &ExperimentConfig, depths: &[usize], exec: Execution) -> Result<Vec<RunRecord>, ExperimentError> {
    let points: Vec<SweepPoint> = depths.iter().map(|&depth| SweepPoint { depth, probes: cfg.probes_per_task }).collect();
    ExperimentConfig { depths: depths.to_vec(), ..cfg.clone() }.validate()?;
    run_points(cfg, &points, exec)
}

pub fn run_probe_sweep(cfg: &ExperimentConfig, counts: &[usize], exec: Execution) -> Result<Vec<RunRecord>, ExperimentError> {
    let points: Vec<SweepPoint> = counts.iter().map(|&probes| SweepPoint { depth: cfg.depth, probes }).collect();
    ExperimentConfig { probe_counts: counts.to_vec(), ..cfg.clone() }.validate()?;
    run_points(cfg, &points, exec)
}

fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(path).map_err(|e| ExperimentError::io(path, e))
}

/// Writes per-job CSVs and snapshots, then the merged `metrics.csv`, `summary.csv`,
/// `config.toml` and `manifest.json`.
pub fn write_results(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    records: &[RunRecord],
    parallel: bool,
    total_seconds: f64,
) -> Result<RunManifest, ExperimentError> {
    create_dir(&dir.join("jobs"))?;
    create_dir(&dir.join("snapshots"))?;
    let mut all = Vec::new();
    let mut manifest = RunManifest::new(command, cfg, parallel);
    for rec in records {
        let label = rec.label();
        write_rows(&dir.join("jobs").join(format!("{label}.csv")), &rec.rows)?;
        let saved = SavedRun {
            sequence: cfg.sequence_config(rec.seed, rec.point.depth, rec.point.probes),
            tasks: rec.run.tasks.clone(),
            snapshots: rec.run.snapshots.clone(),
        };
        let path = dir.join("snapshots").join(format!("{label}.json"));
        let json = serde_json::to_string(&saved).map_err(ExperimentError::runtime)?;
        std::fs::write(&path, json).map_err(|e| ExperimentError::io(&path, e))?;
        all.extend(rec.rows.iter().cloned());
        manifest.durations.push((label, rec.seconds));
    }
    write_rows(&dir.join("metrics.csv"), &all)?;
    write_summary(&dir.join("summary.csv"), &aggregate(&all))?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| ExperimentError::io(&cfg_path, e))?;
    manifest.total_seconds = total_seconds;
    manifest.record_outputs(dir)?;
    manifest.write(dir)?;
    Ok(manifest)
}

/// Loads every persisted job under `dir/snapshots`, sorted by file name.
pub fn load_snapshots(dir: &Path) -> Result<Vec<SavedRun>, ExperimentError> {
    let snap_dir = dir.join("snapshots");
    let missing = || ExperimentError::MissingSnapshots(snap_dir.display().to_string());
    let mut paths: Vec<_> = std::fs::read_dir(&snap_dir)
        .map_err(|_| missing())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    if paths.is_empty() {
        return Err(missing());
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| ExperimentError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| ExperimentError::io(p, e))
        })
        .collect()
}
