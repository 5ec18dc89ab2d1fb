//! Feature tracking across snapshots, importance ranking, intervention probes
//! and a planted-dictionary generator for recovery checks.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ActivationDataset, CrosscoderError, CrosscoderState};
use crate::exec::Execution;
use crate::geometry::{allocated_capacity, FeatureMatrix};
use crate::rng::{self, tag};

/// One latent at one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub snapshot_id: u32,
    pub decoder: Vec<f64>,
    pub norm: f64,
    pub normalized_capacity: f64,
    /// `mean(y · f_i)` on the task's data.
    pub beta: f64,
    /// Probe applied to the decoder column.
    pub gamma: f64,
    pub importance: f64,
    /// Fraction of samples on which the latent fires.
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub latent: usize,
    /// One point per snapshot, in the state's storage order.
    pub points: Vec<TrackPoint>,
}

/// Tracks every latent across the state's snapshots for one task.
///
/// Latents at snapshot `k` come from that snapshot's encoder term alone, so `β̂` and
/// the activation frequency can change between snapshots. `probes[k]` is the task's
/// readout at snapshot `k`; `labels[s]` is the task label of sample `s`.
pub fn track_features(
    state: &CrosscoderState,
    data: &ActivationDataset,
    probes: &[DVector<f64>],
    labels: &[f64],
    exec: Execution,
) -> Result<Vec<FeatureTrack>, CrosscoderError> {
    if data.snapshot_ids() != state.snapshot_ids.as_slice() {
        return Err(CrosscoderError::Shape("dataset snapshots differ from the crosscoder's".into()));
    }
    if probes.len() != state.n_snapshots() || probes.iter().any(|p| p.len() != state.d_model()) {
        return Err(CrosscoderError::Shape(format!("need {} probes of length {}", state.n_snapshots(), state.d_model())));
    }
    if labels.len() != data.len() {
        return Err(CrosscoderError::Shape(format!("{} labels for {} samples", labels.len(), data.len())));
    }
    let n = data.len() as f64;
    let y = DVector::from_column_slice(labels);
    let per_snapshot = exec.map_range(state.n_snapshots(), |k| -> Result<_, CrosscoderError> {
        let f = state.encode_single(k, data.block(k))?;
        let beta = &f * &y / n;
        let freq: Vec<f64> = f.row_iter().map(|r| r.iter().filter(|&&v| v != 0.0).count() as f64 / n).collect();
        let gamma = state.w_dec[k].tr_mul(&probes[k]);
        let cap = allocated_capacity(&FeatureMatrix::new(state.w_dec[k].clone()).map_err(|e| CrosscoderError::Shape(e.to_string()))?);
        Ok((beta, freq, gamma, cap))
    });
    let per_snapshot = per_snapshot.into_iter().collect::<Result<Vec<_>, _>>()?;
    let tracks = (0..state.d_cross())
        .map(|i| FeatureTrack {
            latent: i,
            points: per_snapshot
                .iter()
                .enumerate()
                .map(|(k, (beta, freq, gamma, cap))| TrackPoint {
                    snapshot_id: state.snapshot_ids[k],
                    decoder: state.w_dec[k].column(i).iter().copied().collect(),
                    norm: cap.norms[i],
                    normalized_capacity: cap.normalized_capacity[i],
                    beta: beta[i],
                    gamma: gamma[i],
                    importance: beta[i] * gamma[i],
                    frequency: freq[i],
                })
                .collect(),
        })
        .collect();
    Ok(tracks)
}

/// The `count` latents with the largest importance at storage position `k`; ties go to the lower index.
pub fn top_features(tracks: &[FeatureTrack], k: usize, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    order.sort_by(|&a, &b| tracks[b].points[k].importance.total_cmp(&tracks[a].points[k].importance).then(a.cmp(&b)));
    order.truncate(count);
    order.into_iter().map(|i| tracks[i].latent).collect()
}

/// Intervened and random-weighted probes for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionProbes {
    /// `κ Σ_i I_i^(base) W_dec,i^(latest)` over the selected latents.
    pub intervened: DVector<f64>,
    /// Same columns with standard-normal weights.
    pub random: DVector<f64>,
    pub weights: Vec<f64>,
    pub random_weights: Vec<f64>,
}

/// Least-squares gain `κ` minimising `Σ_s (κ pᵀa_s − y_s)²`; zero for a probe that reads nothing.
pub fn calibrated_gain(probe: &DVector<f64>, acts: &DMatrix<f64>, labels: &[f64]) -> f64 {
    let pred = acts.tr_mul(probe);
    let den = pred.norm_squared();
    if den <= f64::MIN_POSITIVE {
        return 0.0;
    }
    pred.iter().zip(labels).map(|(p, y)| p * y).sum::<f64>() / den
}

/// `1 / (1 + MSE)` of `probe` reading `acts` (`d_model × N`) against `labels`.
pub fn probe_accuracy(probe: &DVector<f64>, acts: &DMatrix<f64>, labels: &[f64]) -> f64 {
    let pred = acts.tr_mul(probe);
    let mse = pred.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / labels.len() as f64;
    1.0 / (1.0 + mse)
}

/// Builds the intervention probe for `selected` latents.
///
/// Weights are importances at snapshot `base`. Each probe's gain is fitted once on the
/// base snapshot, using base decoder columns, base activations and `labels`, then
/// carried unchanged to the `latest` decoder columns.
#[allow(clippy::too_many_arguments)]
pub fn intervention_probe(
    state: &CrosscoderState,
    tracks: &[FeatureTrack],
    selected: &[usize],
    base: u32,
    latest: u32,
    base_acts: &DMatrix<f64>,
    labels: &[f64],
    seed: u64,
) -> Result<InterventionProbes, CrosscoderError> {
    let kb = state.position(base)?;
    let kl = state.position(latest)?;
    if base_acts.nrows() != state.d_model() || base_acts.ncols() != labels.len() {
        return Err(CrosscoderError::Shape(format!("base activations {:?} with {} labels", base_acts.shape(), labels.len())));
    }
    if tracks.len() != state.d_cross() || selected.iter().any(|&i| i >= state.d_cross()) {
        return Err(CrosscoderError::Shape("tracks do not cover the selected latents".into()));
    }
    let weights: Vec<f64> = selected.iter().map(|&i| tracks[i].points[kb].importance).collect();
    let mut g = rng::stream(seed, &[tag::RANDOM_PROBE]);
    let random_weights: Vec<f64> = selected.iter().map(|_| g.sample(StandardNormal)).collect();
    let combine = |k: usize, w: &[f64]| {
        let mut p = DVector::zeros(state.d_model());
        for (&i, &c) in selected.iter().zip(w) {
            p.axpy(c, &state.w_dec[k].column(i), 1.0);
        }
        p
    };
    let build = |w: &[f64]| {
        let kappa = calibrated_gain(&combine(kb, w), base_acts, labels);
        combine(kl, w) * kappa
    };
    Ok(InterventionProbes { intervened: build(&weights), random: build(&random_weights), weights, random_weights })
}

/// Activations that are sparse nonnegative combinations of known unit directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedData {
    /// `d_model × n_directions`, unit columns.
    pub directions: DMatrix<f64>,
    pub data: ActivationDataset,
}

/// Each sample mixes `active` distinct directions with coefficients uniform in `[0.5, 1.5]`.
pub fn planted_dataset(n_directions: usize, d_model: usize, n_samples: usize, active: usize, seed: u64) -> Result<PlantedData, CrosscoderError> {
    if n_directions == 0 || d_model == 0 || n_samples == 0 || active == 0 || active > n_directions {
        return Err(CrosscoderError::InvalidConfig(format!(
            "planted data with {n_directions} directions, {active} active, d_model {d_model}, {n_samples} samples"
        )));
    }
    let mut g = rng::stream(seed, &[tag::PLANTED]);
    let mut directions = DMatrix::from_fn(d_model, n_directions, |_, _| g.sample::<f64, _>(StandardNormal));
    for mut col in directions.column_iter_mut() {
        col.normalize_mut();
    }
    let mut acts = DMatrix::zeros(d_model, n_samples);
    for s in 0..n_samples {
        for j in sample(&mut g, n_directions, active).into_iter() {
            let c = g.gen_range(0.5..1.5);
            acts.column_mut(s).axpy(c, &directions.column(j), 1.0);
        }
    }
    Ok(PlantedData { directions, data: ActivationDataset::new(vec![0], vec![acts])? })
}

/// Greedy one-to-one matching of `targets` columns to `candidates` columns by |cosine|,
/// best pair first. Returns `(target, candidate, |cos|)` sorted by target.
pub fn greedy_match(candidates: &DMatrix<f64>, targets: &DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let unit = |m: &DMatrix<f64>| {
        let mut u = m.clone();
        for mut c in u.column_iter_mut() {
            let n = c.norm();
            if n > 0.0 {
                c /= n;
            }
        }
        u
    };
    let cos = unit(targets).tr_mul(&unit(candidates)).map(f64::abs);
    let mut pairs: Vec<(usize, usize, f64)> =
        (0..cos.nrows()).flat_map(|t| (0..cos.ncols()).map(move |c| (t, c))).map(|(t, c)| (t, c, cos[(t, c)])).collect();
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_t = vec![false; cos.nrows()];
    let mut used_c = vec![false; cos.ncols()];
    let mut out = Vec::new();
    for (t, c, v) in pairs {
        if !used_t[t] && !used_c[c] {
            used_t[t] = true;
            used_c[c] = true;
            out.push((t, c, v));
        }
    }
    out.sort_by_key(|p| p.0);
    out
}
