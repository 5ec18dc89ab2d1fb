//! Long-format metric tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::metrics::{forgetting, MetricKind, MetricSeries};
use crate::tasks::Scenario;

pub const HEADER: &str = "scenario,seed,depth,probes,task_i,checkpoint_t,metric,value";
pub const SUMMARY_HEADER: &str = "scenario,depth,probes,task_i,checkpoint_t,metric,mean,std,n_seeds";

/// One long-format row. `task_i` and `checkpoint_t` are 1-based; forgetting rows
/// (`f_<metric>`) aggregate over earlier tasks and carry `task_i = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub scenario: Scenario,
    pub seed: u64,
    pub depth: usize,
    pub probes: usize,
    pub task_i: usize,
    pub checkpoint_t: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: Scenario,
    pub depth: usize,
    pub probes: usize,
    pub task_i: usize,
    pub checkpoint_t: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

/// Nine significant digits in scientific notation.
pub fn format_value(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.8e}")
    } else {
        x.to_string()
    }
}

/// Raw metrics for every `(task, checkpoint ≥ task)` followed by forgetting scores for `t ≥ 2`.
pub fn metric_rows(scenario: Scenario, seed: u64, depth: usize, probes: usize, series: &MetricSeries) -> Vec<CsvRow> {
    let row = |task_i, checkpoint_t, metric: String, value| CsvRow { scenario, seed, depth, probes, task_i, checkpoint_t, metric, value };
    let mut out = Vec::new();
    for kind in MetricKind::ALL {
        for (i, t, v) in series.entries(kind) {
            out.push(row(i + 1, t, kind.as_str().to_string(), v));
        }
    }
    for kind in MetricKind::ALL {
        for t in 2..=series.n_tasks() {
            if let Ok(f) = forgetting(series, kind, t) {
                out.push(row(0, t, format!("f_{}", kind.as_str()), f.value));
            }
        }
    }
    out
}

pub fn write_rows(path: &Path, rows: &[CsvRow]) -> Result<(), ExperimentError> {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(HEADER);
    s.push('\n');
    for r in rows {
        let _ =
            writeln!(s, "{},{},{},{},{},{},{},{}", r.scenario, r.seed, r.depth, r.probes, r.task_i, r.checkpoint_t, r.metric, format_value(r.value));
    }
    std::fs::write(path, s).map_err(|e| ExperimentError::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<CsvRow>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(ExperimentError::io(path, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let bad = |what: &str| ExperimentError::io(path, format!("line {}: {what}", k + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad("expected 8 fields"));
            }
            Ok(CsvRow {
                scenario: f[0].parse().map_err(|e: String| bad(&e))?,
                seed: f[1].parse().map_err(|_| bad("seed"))?,
                depth: f[2].parse().map_err(|_| bad("depth"))?,
                probes: f[3].parse().map_err(|_| bad("probes"))?,
                task_i: f[4].parse().map_err(|_| bad("task_i"))?,
                checkpoint_t: f[5].parse().map_err(|_| bad("checkpoint_t"))?,
                metric: f[6].to_string(),
                value: f[7].parse().map_err(|_| bad("value"))?,
            })
        })
        .collect()
}

/// Seed mean and sample standard deviation per `(scenario, depth, probes, task, checkpoint, metric)`,
/// in order of first appearance.
pub fn aggregate(rows: &[CsvRow]) -> Vec<SummaryRow> {
    type Key = (Scenario, usize, usize, usize, usize, String);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut index: std::collections::HashMap<Key, usize> = std::collections::HashMap::new();
    for r in rows {
        let key = (r.scenario, r.depth, r.probes, r.task_i, r.checkpoint_t, r.metric.clone());
        let id = *index.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            order.len() - 1
        });
        groups.entry(id).or_default().push(r.value);
    }
    order
        .into_iter()
        .enumerate()
        .map(|(id, (scenario, depth, probes, task_i, checkpoint_t, metric))| {
            let v = &groups[&id];
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            SummaryRow { scenario, depth, probes, task_i, checkpoint_t, metric, mean, std, n_seeds: v.len() }
        })
        .collect()
}

pub(crate) fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), ExperimentError> {
    let mut s = String::new();
    s.push_str(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.depth,
            r.probes,
            r.task_i,
            r.checkpoint_t,
            r.metric,
            format_value(r.mean),
            format_value(r.std),
            r.n_seeds
        );
    }
    std::fs::write(path, s).map_err(|e| ExperimentError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, metric: &str, value: f64) -> CsvRow {
        CsvRow { scenario: Scenario::Full, seed, depth: 1, probes: 2, task_i: 1, checkpoint_t: 3, metric: metric.into(), value }
    }

    #[test]
    fn header_is_stable() {
        assert_eq!(HEADER, "scenario,seed,depth,probes,task_i,checkpoint_t,metric,value");
    }

    #[test]
    fn golden_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows =
            vec![row(0, "accuracy", 0.5), CsvRow { scenario: Scenario::Disjoint, ..row(7, "f_norm", -1.0 / 3.0) }, row(1, "gamma", 123456.789012345)];
        write_rows(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "scenario,seed,depth,probes,task_i,checkpoint_t,metric,value\n\
             full,0,1,2,1,3,accuracy,5.00000000e-1\n\
             none,7,1,2,1,3,f_norm,-3.33333333e-1\n\
             full,1,1,2,1,3,gamma,1.23456789e5\n"
        );
        let back = read_rows(&p).unwrap();
        assert_eq!(back[1].scenario, Scenario::Disjoint);
        assert!((back[2].value - 123456.789).abs() < 1e-9);
    }

    #[test]
    fn aggregate_mean_and_sample_std() {
        let rows = vec![row(0, "norm", 1.0), row(1, "norm", 3.0), row(0, "gamma", 2.0)];
        let s = aggregate(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].metric, "norm");
        assert_eq!(s[0].mean, 2.0);
        assert!((s[0].std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!((s[1].std, s[1].n_seeds), (0.0, 1));
    }

    #[test]
    fn metric_rows_layout() {
        let vals = vec![vec![None, Some(2.0), Some(1.0)], vec![None, None, Some(4.0)]];
        let series = MetricSeries::from_values(2, vec![(MetricKind::Norm, vals)]).unwrap();
        let rows = metric_rows(Scenario::Full, 3, 1, 1, &series);
        let norm: Vec<_> = rows.iter().filter(|r| r.metric == "norm").map(|r| (r.task_i, r.checkpoint_t, r.value)).collect();
        assert_eq!(norm, vec![(1, 1, 2.0), (1, 2, 1.0), (2, 2, 4.0)]);
        let f: Vec<_> = rows.iter().filter(|r| r.metric == "f_norm").collect();
        assert_eq!(f.len(), 1);
        assert_eq!((f[0].task_i, f[0].checkpoint_t, f[0].value), (0, 2, 0.5));
    }
}
