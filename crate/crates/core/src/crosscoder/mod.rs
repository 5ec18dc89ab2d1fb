//! TopK crosscoder over activations of several model snapshots.
//!
//! All snapshots share one latent space:
//!
//! ```text
//! f   = TopK(ReLU(Σ_t W_enc^t a^t + b_enc))
//! â^t = W_dec^t f + b_dec^t
//! L   = Σ_t ‖a^t − â^t‖² + λ Σ_i f_i Σ_t ‖W_dec,i^t‖
//! ```
//!
//! With one snapshot this is a plain TopK sparse autoencoder.

mod data;
mod track;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::reader::optim::{AdamParams, Optimizer, OptimizerKind};
use crate::rng::{self, tag};

pub use data::{ActivationDataset, FORMAT_VERSION, MAGIC};
pub use track::{
    calibrated_gain, greedy_match, intervention_probe, planted_dataset, probe_accuracy, top_features, track_features, FeatureTrack,
    InterventionProbes, PlantedData, TrackPoint,
};

#[derive(Debug, Error, PartialEq)]
pub enum CrosscoderError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown snapshot id {0}")]
    UnknownSnapshot(u32),
    #[error("snapshot id {0} appears twice")]
    DuplicateSnapshot(u32),
    #[error("invalid crosscoder config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("training diverged at step {0}")]
    Diverged(usize),
    #[error("malformed activation file: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for CrosscoderError {
    fn from(e: std::io::Error) -> Self {
        CrosscoderError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscoderConfig {
    pub d_cross: usize,
    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_max: f64,
    /// Fraction of optimizer steps over which λ ramps linearly from 0 to `lambda_max`.
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl CrosscoderConfig {
    /// Defaults for a given activation width: `d_cross = 1.5·d_model`, `K = 6`.
    pub fn for_model(d_model: usize) -> Self {
        Self { d_cross: (3 * d_model).div_ceil(2), k: 6, lr: 5e-4, batch_size: 256, epochs: 3, lambda_max: 0.001, warmup_fraction: 0.05, seed: 0 }
    }

    pub fn validate(&self, d_model: usize) -> Result<(), CrosscoderError> {
        let bad = |m: String| Err(CrosscoderError::InvalidConfig(m));
        if self.d_cross <= d_model {
            return bad(format!("d_cross ({}) must exceed d_model ({d_model})", self.d_cross));
        }
        if self.k == 0 || self.k > self.d_cross {
            return bad(format!("k must lie in 1..={}, got {}", self.d_cross, self.k));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return bad(format!("lambda_max must be nonnegative, got {}", self.lambda_max));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must lie in [0, 1], got {}", self.warmup_fraction));
        }
        Ok(())
    }

    /// λ at optimizer step `step` (0-based) out of `total`.
    pub fn lambda_at(&self, step: usize, total: usize) -> f64 {
        let warm = self.warmup_fraction * total as f64;
        if warm <= 0.0 {
            return self.lambda_max;
        }
        self.lambda_max * ((step + 1) as f64 / warm).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrosscoderState {
    pub snapshot_ids: Vec<u32>,
    /// One `d_cross × d_model` encoder per snapshot.
    pub w_enc: Vec<DMatrix<f64>>,
    pub b_enc: DVector<f64>,
    /// One `d_model × d_cross` decoder per snapshot.
    pub w_dec: Vec<DMatrix<f64>>,
    pub b_dec: Vec<DVector<f64>>,
    pub k: usize,
}

impl CrosscoderState {
    /// Unit-norm Gaussian decoder columns, encoders equal to the decoder transposes, zero biases.
    pub fn init(snapshot_ids: &[u32], d_model: usize, d_cross: usize, k: usize, seed: u64) -> Result<Self, CrosscoderError> {
        if snapshot_ids.is_empty() || d_model == 0 || d_cross == 0 || k == 0 || k > d_cross {
            return Err(CrosscoderError::InvalidConfig(format!("{} snapshots, d_model {d_model}, d_cross {d_cross}, k {k}", snapshot_ids.len())));
        }
        let mut w_dec = Vec::with_capacity(snapshot_ids.len());
        for (s, _) in snapshot_ids.iter().enumerate() {
            let mut g = rng::stream(seed, &[tag::CROSSCODER_INIT, s as u64]);
            let mut d = DMatrix::from_fn(d_model, d_cross, |_, _| g.sample::<f64, _>(StandardNormal));
            for mut col in d.column_iter_mut() {
                let norm = col.norm();
                if norm > 0.0 {
                    col /= norm;
                }
            }
            w_dec.push(d);
        }
        let w_enc = w_dec.iter().map(|d| d.transpose()).collect();
        Ok(Self {
            snapshot_ids: snapshot_ids.to_vec(),
            w_enc,
            b_enc: DVector::zeros(d_cross),
            w_dec,
            b_dec: vec![DVector::zeros(d_model); snapshot_ids.len()],
            k,
        })
    }

    pub fn d_cross(&self) -> usize {
        self.b_enc.len()
    }

    pub fn d_model(&self) -> usize {
        self.w_dec[0].nrows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.snapshot_ids.len()
    }

    pub fn position(&self, id: u32) -> Result<usize, CrosscoderError> {
        self.snapshot_ids.iter().position(|&s| s == id).ok_or(CrosscoderError::UnknownSnapshot(id))
    }

    /// Decoder column `i` of the snapshot at storage position `k`.
    pub fn decoder_vector(&self, k: usize, i: usize) -> DVector<f64> {
        self.w_dec[k].column(i).into_owned()
    }

    /// `Σ_t ‖W_dec,i^t‖` for every latent.
    pub fn decoder_norm_sums(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.d_cross());
        for d in &self.w_dec {
            for (i, col) in d.column_iter().enumerate() {
                s[i] += col.norm();
            }
        }
        s
    }

    fn check_batch(&self, acts: &[DMatrix<f64>]) -> Result<(), CrosscoderError> {
        if acts.len() != self.n_snapshots() {
            return Err(CrosscoderError::Shape(format!("{} activation blocks for {} snapshots", acts.len(), self.n_snapshots())));
        }
        let cols = acts[0].ncols();
        if let Some(a) = acts.iter().find(|a| a.nrows() != self.d_model() || a.ncols() != cols) {
            return Err(CrosscoderError::Shape(format!("activation block {:?}, expected {} rows and {cols} columns", a.shape(), self.d_model())));
        }
        Ok(())
    }

    /// Pre-activations `Σ_t W_enc^t a^t + b_enc` for a batch (`d_cross × B`).
    fn pre_activations(&self, acts: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut pre = &self.w_enc[0] * &acts[0];
        for (w, a) in self.w_enc.iter().zip(acts).skip(1) {
            pre.gemm(1.0, w, a, 1.0);
        }
        for mut col in pre.column_iter_mut() {
            col += &self.b_enc;
        }
        pre
    }

    /// Encodes a batch of samples (columns of each block) into sparse latents (`d_cross × B`).
    pub fn encode_batch(&self, acts: &[DMatrix<f64>]) -> Result<DMatrix<f64>, CrosscoderError> {
        self.check_batch(acts)?;
        let mut pre = self.pre_activations(acts);
        for mut col in pre.column_iter_mut() {
            let v = topk_relu(col.as_slice(), self.k);
            col.copy_from_slice(&v);
        }
        Ok(pre)
    }

    /// Latents for one sample given one activation vector per snapshot.
    pub fn encode(&self, acts: &[DVector<f64>]) -> Result<DVector<f64>, CrosscoderError> {
        let blocks: Vec<DMatrix<f64>> = acts.iter().map(|a| DMatrix::from_column_slice(a.len(), 1, a.as_slice())).collect();
        Ok(self.encode_batch(&blocks)?.column(0).into_owned())
    }

    /// Latents using only snapshot `k`'s encoder term plus the shared bias.
    pub fn encode_single(&self, k: usize, acts: &DMatrix<f64>) -> Result<DMatrix<f64>, CrosscoderError> {
        if k >= self.n_snapshots() || acts.nrows() != self.d_model() {
            return Err(CrosscoderError::Shape(format!("snapshot position {k}, block {:?}", acts.shape())));
        }
        let mut pre = &self.w_enc[k] * acts;
        for mut col in pre.column_iter_mut() {
            col += &self.b_enc;
            let v = topk_relu(col.as_slice(), self.k);
            col.copy_from_slice(&v);
        }
        Ok(pre)
    }

    /// Dataset-wide encoding in fixed-size chunks; chunk results are concatenated in order.
    pub fn encode_dataset(&self, data: &ActivationDataset, exec: Execution) -> Result<DMatrix<f64>, CrosscoderError> {
        const CHUNK: usize = 512;
        let n = data.len();
        let chunks = n.div_ceil(CHUNK);
        let parts = exec.map_range(chunks, |c| {
            let idx: Vec<usize> = (c * CHUNK..((c + 1) * CHUNK).min(n)).collect();
            self.encode_batch(&data.select(&idx))
        });
        let mut out = DMatrix::zeros(self.d_cross(), n);
        for (c, part) in parts.into_iter().enumerate() {
            let part = part?;
            out.columns_mut(c * CHUNK, part.ncols()).copy_from(&part);
        }
        Ok(out)
    }

    /// `W_dec^t f + b_dec^t` for snapshot `id`.
    pub fn decode(&self, f: &DVector<f64>, id: u32) -> Result<DVector<f64>, CrosscoderError> {
        let k = self.position(id)?;
        if f.len() != self.d_cross() {
            return Err(CrosscoderError::Shape(format!("latent of length {} for d_cross {}", f.len(), self.d_cross())));
        }
        Ok(&self.w_dec[k] * f + &self.b_dec[k])
    }

    /// Mean over samples of `Σ_t ‖a^t − â^t‖²`.
    pub fn reconstruction_error(&self, data: &ActivationDataset, exec: Execution) -> Result<f64, CrosscoderError> {
        self.check_batch(data.blocks())?;
        let f = self.encode_dataset(data, exec)?;
        let mut total = 0.0;
        for (k, a) in data.blocks().iter().enumerate() {
            let mut rec = &self.w_dec[k] * &f;
            for mut col in rec.column_iter_mut() {
                col += &self.b_dec[k];
            }
            total += (rec - a).norm_squared();
        }
        Ok(total / data.len() as f64)
    }
}

/// ReLU then keep the `k` largest positive entries; ties go to the lower index.
pub fn topk_relu(pre: &[f64], k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..pre.len()).filter(|&i| pre[i] > 0.0).collect();
    if idx.len() > k {
        idx.sort_by(|&a, &b| pre[b].total_cmp(&pre[a]).then(a.cmp(&b)));
        idx.truncate(k);
    }
    let mut out = vec![0.0; pre.len()];
    for i in idx {
        out[i] = pre[i];
    }
    out
}

/// Loss pieces and gradients for one batch with the TopK selection held as computed.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub reconstruction: f64,
    pub sparsity: f64,
    pub w_enc: Vec<DMatrix<f64>>,
    pub b_enc: DVector<f64>,
    pub w_dec: Vec<DMatrix<f64>>,
    pub b_dec: Vec<DVector<f64>>,
}

/// Batch-mean loss and gradients. `mask`, when given, overrides the TopK selection
/// (entry `(i, s)` nonzero keeps latent `i` for sample `s`).
pub fn batch_grads(state: &CrosscoderState, acts: &[DMatrix<f64>], lambda: f64, mask: Option<&DMatrix<f64>>) -> BatchGrads {
    let b = acts[0].ncols() as f64;
    let pre = state.pre_activations(acts);
    let mut f = pre.clone();
    for (s, mut col) in f.column_iter_mut().enumerate() {
        let v = match mask {
            Some(m) => (0..col.len()).map(|i| if m[(i, s)] != 0.0 { col[i] } else { 0.0 }).collect(),
            None => topk_relu(col.as_slice(), state.k),
        };
        col.copy_from_slice(&v);
    }
    let norms: Vec<DVector<f64>> = state.w_dec.iter().map(|d| DVector::from_iterator(d.ncols(), d.column_iter().map(|c| c.norm()))).collect();
    let norm_sum = norms.iter().fold(DVector::zeros(state.d_cross()), |acc, n| acc + n);

    let mut reconstruction = 0.0;
    let mut df = DMatrix::zeros(f.nrows(), f.ncols());
    let mut w_dec = Vec::with_capacity(acts.len());
    let mut b_dec = Vec::with_capacity(acts.len());
    let f_sum = f.column_sum();
    let sparsity = lambda * f_sum.dot(&norm_sum) / b;
    for (k, a) in acts.iter().enumerate() {
        let mut r = &state.w_dec[k] * &f;
        for mut col in r.column_iter_mut() {
            col += &state.b_dec[k];
        }
        r -= a;
        reconstruction += r.norm_squared() / b;
        let r2 = r * (2.0 / b);
        df.gemm_tr(1.0, &state.w_dec[k], &r2, 1.0);
        let mut gd = &r2 * f.transpose();
        // ∂/∂W_dec,i of λ mean_s(f_is) ‖W_dec,i‖
        for (i, mut col) in gd.column_iter_mut().enumerate() {
            let n = norms[k][i];
            if n > 0.0 {
                col.axpy(lambda * f_sum[i] / b / n, &state.w_dec[k].column(i), 1.0);
            }
        }
        w_dec.push(gd);
        b_dec.push(r2.column_sum());
    }
    for mut col in df.column_iter_mut() {
        col.axpy(lambda / b, &norm_sum, 1.0);
    }
    // gradient flows only through surviving units
    df.zip_apply(&f, |g, v| {
        if v == 0.0 {
            *g = 0.0;
        }
    });
    let w_enc = acts.iter().map(|a| &df * a.transpose()).collect();
    let b_enc = df.column_sum();
    BatchGrads { reconstruction, sparsity, w_enc, b_enc, w_dec, b_dec }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean reconstruction error over the whole dataset before training.
    pub initial_reconstruction: f64,
    pub final_reconstruction: f64,
    /// Mean batch loss (reconstruction + sparsity) per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Latents that never fire on the training set after training.
    pub dead_latents: Vec<usize>,
}

/// Trains a freshly initialised crosscoder.
pub fn train_crosscoder(
    data: &ActivationDataset,
    cfg: &CrosscoderConfig,
    exec: Execution,
) -> Result<(CrosscoderState, TrainReport), CrosscoderError> {
    cfg.validate(data.d_model())?;
    let state = CrosscoderState::init(data.snapshot_ids(), data.d_model(), cfg.d_cross, cfg.k, cfg.seed)?;
    train_from(state, data, cfg, exec)
}

/// Continues training `state` on `data` with a fresh optimizer and warmup schedule.
pub fn train_from(
    mut state: CrosscoderState,
    data: &ActivationDataset,
    cfg: &CrosscoderConfig,
    exec: Execution,
) -> Result<(CrosscoderState, TrainReport), CrosscoderError> {
    cfg.validate(data.d_model())?;
    if state.snapshot_ids != data.snapshot_ids() || state.d_model() != data.d_model() {
        return Err(CrosscoderError::Shape("state and dataset cover different snapshots or widths".into()));
    }
    if state.k != cfg.k || state.d_cross() != cfg.d_cross {
        return Err(CrosscoderError::Shape("state and config disagree on k or d_cross".into()));
    }
    let initial_reconstruction = state.reconstruction_error(data, exec)?;
    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let s = state.n_snapshots();
    let mut opt = Optimizer::new(OptimizerKind::Adam, AdamParams::default());
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut g = rng::stream(cfg.seed, &[tag::CROSSCODER_SHUFFLE, epoch as u64]);
        order.shuffle(&mut g);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let acts = data.select(batch);
            let lambda = cfg.lambda_at(step, total);
            let grads = batch_grads(&state, &acts, lambda, None);
            let loss = grads.reconstruction + grads.sparsity;
            if !loss.is_finite() {
                return Err(CrosscoderError::Diverged(step));
            }
            sum += loss;
            opt.begin_step();
            for k in 0..s {
                opt.update(k, &mut state.w_enc[k], &grads.w_enc[k], cfg.lr, 0.0);
                opt.update(s + k, &mut state.w_dec[k], &grads.w_dec[k], cfg.lr, 0.0);
                let mut bd = as_column(&state.b_dec[k]);
                opt.update(2 * s + k, &mut bd, &as_column(&grads.b_dec[k]), cfg.lr, 0.0);
                state.b_dec[k].copy_from_slice(bd.as_slice());
            }
            let mut be = as_column(&state.b_enc);
            opt.update(3 * s, &mut be, &as_column(&grads.b_enc), cfg.lr, 0.0);
            state.b_enc.copy_from_slice(be.as_slice());
            step += 1;
        }
        epoch_losses.push(sum / per_epoch as f64);
    }
    let final_reconstruction = state.reconstruction_error(data, exec)?;
    if !final_reconstruction.is_finite() {
        return Err(CrosscoderError::Diverged(step));
    }
    let f = state.encode_dataset(data, exec)?;
    let dead_latents = (0..state.d_cross()).filter(|&i| f.row(i).iter().all(|&v| v == 0.0)).collect();
    Ok((state, TrainReport { initial_reconstruction, final_reconstruction, epoch_losses, steps: step, dead_latents }))
}

fn as_column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}
