//! Crosscoder study over the snapshots of feature-reader runs.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use super::run::SavedRun;
use super::table::{format_value, SummaryRow};
use super::{ExperimentConfig, ExperimentError};
use crate::crosscoder::{
    greedy_match, intervention_probe, planted_dataset, probe_accuracy, top_features, track_features, train_crosscoder, ActivationDataset,
    CrosscoderConfig, CrosscoderState,
};
use crate::exec::Execution;
use crate::rng::{self, tag};

/// Cosine above which a planted direction counts as recovered.
pub const RECOVERY_COSINE: f64 = 0.9;

/// Crosscoder settings for the planted-dictionary check: 20 directions in 32 dimensions,
/// `d_cross = 48`, `K = 6`, `λ_max = 0.001` with 5% warmup, trained longer and faster than the
/// snapshot defaults.
pub fn planted_recipe(seed: u64) -> CrosscoderConfig {
    CrosscoderConfig { lr: 5e-3, epochs: 20, seed, ..CrosscoderConfig::for_model(32) }
}

/// `(recovered, total)` planted directions for one seed.
pub fn planted_recovery(seed: u64, exec: Execution) -> Result<(usize, usize, f64, f64), ExperimentError> {
    let p = planted_dataset(20, 32, 20_000, 3, seed).map_err(ExperimentError::runtime)?;
    let (st, rep) = train_crosscoder(&p.data, &planted_recipe(seed), exec).map_err(ExperimentError::runtime)?;
    let hits = greedy_match(&st.w_dec[0], &p.directions).iter().filter(|m| m.2 > RECOVERY_COSINE).count();
    Ok((hits, 20, rep.initial_reconstruction, rep.final_reconstruction))
}

/// Shared input set (`N × n_features`): every feature fires independently with probability
/// `1 − sparsity`, uniformly on `[0, 1)`.
pub fn shared_inputs(n_features: usize, n_samples: usize, sparsity: f64, seed: u64) -> DMatrix<f64> {
    let mut g = rng::stream(seed, &[tag::PROBE_DATA]);
    DMatrix::from_fn(n_samples, n_features, |_, _| {
        let gate: f64 = g.gen();
        let value: f64 = g.gen();
        if gate >= sparsity {
            value
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRow {
    pub seed: u64,
    pub depth: usize,
    pub probes: usize,
    pub task_i: usize,
    pub latent: usize,
    pub checkpoint_t: usize,
    pub accuracy: f64,
    pub gamma: f64,
    pub norm: f64,
    pub capacity_norm: f64,
    pub beta: f64,
    pub frequency: f64,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionRow {
    pub seed: u64,
    pub depth: usize,
    pub probes: usize,
    pub task_i: usize,
    pub base_t: usize,
    pub latest_t: usize,
    pub probe: &'static str,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub scenario: crate::tasks::Scenario,
    pub tracks: Vec<TrackRow>,
    pub interventions: Vec<InterventionRow>,
    /// `(seed, recovered, total)`.
    pub planted: Vec<(u64, usize, usize)>,
    pub states: Vec<(String, CrosscoderState)>,
    pub activations: Vec<(String, ActivationDataset)>,
    /// Tracked features that never fire at some checkpoint at or after their task.
    pub inactive_tracked: usize,
}

impl StudyResult {
    /// Seed-averaged accuracy per `(task, probe kind)`.
    pub fn intervention_summary(&self) -> Vec<SummaryRow> {
        let rows: Vec<super::CsvRow> = self
            .interventions
            .iter()
            .map(|r| super::CsvRow {
                scenario: self.scenario,
                seed: r.seed,
                depth: r.depth,
                probes: r.probes,
                task_i: r.task_i,
                checkpoint_t: r.latest_t,
                metric: format!("accuracy_{}", r.probe),
                value: r.accuracy,
            })
            .collect();
        super::aggregate(&rows)
    }

    pub fn write(&self, dir: &Path) -> Result<(), ExperimentError> {
        let cc = dir.join("crosscoder");
        std::fs::create_dir_all(&cc).map_err(|e| ExperimentError::io(&cc, e))?;
        let put = |name: &str, s: String| {
            let p = dir.join(name);
            std::fs::write(&p, s).map_err(|e| ExperimentError::io(&p, e))
        };
        let mut s =
            String::from("scenario,seed,depth,probes,task_i,latent,checkpoint_t,accuracy,gamma,norm,capacity_norm,beta,frequency,importance\n");
        for r in &self.tracks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.scenario,
                r.seed,
                r.depth,
                r.probes,
                r.task_i,
                r.latent,
                r.checkpoint_t,
                format_value(r.accuracy),
                format_value(r.gamma),
                format_value(r.norm),
                format_value(r.capacity_norm),
                format_value(r.beta),
                format_value(r.frequency),
                format_value(r.importance)
            );
        }
        put("crosscoder_tracks.csv", s)?;
        let mut s = String::from("scenario,seed,depth,probes,task_i,base_t,latest_t,probe,accuracy\n");
        for r in &self.interventions {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                self.scenario,
                r.seed,
                r.depth,
                r.probes,
                r.task_i,
                r.base_t,
                r.latest_t,
                r.probe,
                format_value(r.accuracy)
            );
        }
        put("intervention.csv", s)?;
        super::table::write_summary(&dir.join("intervention_summary.csv"), &self.intervention_summary())?;
        let mut s = "seed,recovered,total,cosine_threshold\n".to_string();
        for (seed, hit, total) in &self.planted {
            let _ = writeln!(s, "{seed},{hit},{total},{RECOVERY_COSINE}");
        }
        put("planted.csv", s)?;
        for (label, st) in &self.states {
            let p = cc.join(format!("state_{label}.json"));
            std::fs::write(&p, serde_json::to_string(st).map_err(ExperimentError::runtime)?).map_err(|e| ExperimentError::io(&p, e))?;
        }
        for (label, ds) in &self.activations {
            let p = cc.join(format!("acts_{label}.xcad"));
            ds.save(&p).map_err(|e| ExperimentError::io(&p, e))?;
        }
        Ok(())
    }
}

struct PerRun {
    tracks: Vec<TrackRow>,
    interventions: Vec<InterventionRow>,
    state: CrosscoderState,
    acts: ActivationDataset,
    inactive: usize,
}

fn study_one(cfg: &ExperimentConfig, run: &SavedRun, exec: Execution) -> Result<PerRun, ExperimentError> {
    let seq = &run.sequence;
    let n_tasks = run.tasks.len();
    if run.snapshots.len() != n_tasks + 1 {
        return Err(ExperimentError::Runtime(format!("{} snapshots for {n_tasks} tasks", run.snapshots.len())));
    }
    let inputs = shared_inputs(seq.n_features, cfg.crosscoder.probe_samples, seq.sparsity, seq.seed);
    // checkpoints 1..=T, stored at positions 0..T
    let blocks: Vec<DMatrix<f64>> = run.snapshots[1..].iter().map(|s| s.encoder().product() * inputs.transpose()).collect();
    let ids: Vec<u32> = (1..=n_tasks as u32).collect();
    let acts = ActivationDataset::new(ids, blocks).map_err(ExperimentError::runtime)?;
    let xcfg = cfg.crosscoder.to_config(seq.m_dims, seq.seed);
    let (state, _) = train_crosscoder(&acts, &xcfg, exec).map_err(ExperimentError::runtime)?;

    let mut tracks_out = Vec::new();
    let mut interventions = Vec::new();
    let mut inactive = 0;
    let latest = n_tasks - 1;
    for (i, task) in run.tasks.iter().enumerate() {
        let labels: Vec<f64> = (&inputs * &task.beta).iter().copied().collect();
        let probes: Vec<DVector<f64>> = run.snapshots[1..]
            .iter()
            .map(|s| {
                let p = s.probes().for_task(i);
                s.probes().probes()[p[0]].vector.as_vector().clone()
            })
            .collect();
        let tracks = track_features(&state, &acts, &probes, &labels, Execution::Sequential).map_err(ExperimentError::runtime)?;
        let top = top_features(&tracks, i, cfg.crosscoder.top_features);
        for (k, probe) in probes.iter().enumerate().take(n_tasks).skip(i) {
            let accuracy = probe_accuracy(probe, acts.block(k), &labels);
            for &l in &top {
                let p = &tracks[l].points[k];
                if p.frequency == 0.0 {
                    inactive += 1;
                }
                tracks_out.push(TrackRow {
                    seed: seq.seed,
                    depth: seq.depth,
                    probes: seq.probes_per_task,
                    task_i: i + 1,
                    latent: l,
                    checkpoint_t: k + 1,
                    accuracy,
                    gamma: p.gamma,
                    norm: p.norm,
                    capacity_norm: p.normalized_capacity,
                    beta: p.beta,
                    frequency: p.frequency,
                    importance: p.importance,
                });
            }
        }
        let ip = intervention_probe(
            &state,
            &tracks,
            &top,
            (i + 1) as u32,
            n_tasks as u32,
            acts.block(i),
            &labels,
            rng::derive_seed(seq.seed, &[i as u64]),
        )
        .map_err(ExperimentError::runtime)?;
        for (name, probe) in [("original", &probes[latest]), ("intervened", &ip.intervened), ("random", &ip.random)] {
            interventions.push(InterventionRow {
                seed: seq.seed,
                depth: seq.depth,
                probes: seq.probes_per_task,
                task_i: i + 1,
                base_t: i + 1,
                latest_t: n_tasks,
                probe: name,
                accuracy: probe_accuracy(probe, acts.block(latest), &labels),
            });
        }
    }
    Ok(PerRun { tracks: tracks_out, interventions, state, acts, inactive })
}

/// Trains one crosscoder per saved run and tracks each task's top features across checkpoints.
pub fn run_crosscoder_study(cfg: &ExperimentConfig, runs: &[SavedRun], exec: Execution) -> Result<StudyResult, ExperimentError> {
    cfg.validate()?;
    if runs.is_empty() {
        return Err(ExperimentError::MissingSnapshots("no runs supplied".into()));
    }
    let per: Vec<PerRun> = exec.map(runs, |r| study_one(cfg, r, Execution::Sequential)).into_iter().collect::<Result<_, _>>()?;
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.sequence.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let planted =
        exec.map(&seeds, |&s| planted_recovery(s, Execution::Sequential).map(|(h, t, _, _)| (s, h, t))).into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut result = StudyResult {
        scenario: runs[0].sequence.scenario,
        tracks: Vec::new(),
        interventions: Vec::new(),
        planted,
        states: Vec::new(),
        activations: Vec::new(),
        inactive_tracked: 0,
    };
    for (run, p) in runs.iter().zip(per) {
        let label = format!("d{}_p{}_s{}", run.sequence.depth, run.sequence.probes_per_task, run.sequence.seed);
        result.tracks.extend(p.tracks);
        result.interventions.extend(p.interventions);
        result.inactive_tracked += p.inactive;
        result.states.push((label.clone(), p.state));
        result.activations.push((label, p.acts));
    }
    Ok(result)
}
