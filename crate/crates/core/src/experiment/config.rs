use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::crosscoder::CrosscoderConfig;
use crate::reader::{AdamParams, GradientMode, LossKind, OptimizerKind, ProbeMode, SequenceConfig, TrainConfig};
use crate::tasks::Scenario;

pub const MAX_DEPTH: usize = 10;

/// Named presets applied on top of the defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 2000 samples, 1000 epochs, seeds 0..3.
    Fast,
    /// The full protocol: 20000 samples, 10000 epochs, seeds 0..5.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fast" => Ok(Profile::Fast),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile `{other}` (expected `fast` or `paper`)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrosscoderSection {
    pub enabled: bool,
    /// Defaults to `1.5 · m_dims` when absent.
    pub d_cross: Option<usize>,
    pub k: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_max: f64,
    pub warmup_fraction: f64,
    /// Size of the shared input set whose activations are collected from every snapshot.
    pub probe_samples: usize,
    /// Features kept per task when ranking by importance.
    pub top_features: usize,
}

impl Default for CrosscoderSection {
    fn default() -> Self {
        let base = CrosscoderConfig::for_model(20);
        Self {
            enabled: true,
            d_cross: None,
            k: base.k,
            lr: base.lr,
            batch_size: base.batch_size,
            epochs: base.epochs,
            lambda_max: base.lambda_max,
            warmup_fraction: base.warmup_fraction,
            probe_samples: 4000,
            top_features: 5,
        }
    }
}

impl CrosscoderSection {
    pub fn to_config(&self, d_model: usize, seed: u64) -> CrosscoderConfig {
        CrosscoderConfig {
            d_cross: self.d_cross.unwrap_or_else(|| CrosscoderConfig::for_model(d_model).d_cross),
            k: self.k,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lambda_max: self.lambda_max,
            warmup_fraction: self.warmup_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub n_features: usize,
    pub m_dims: usize,
    pub n_tasks: usize,
    pub n_samples: usize,
    pub sparsity: f64,
    pub seeds: Vec<u64>,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub depth: usize,
    pub probes_per_task: usize,
    pub probe_mode: ProbeMode,
    pub probe_lr: f64,
    pub loss: LossKind,
    pub weight_decay: f64,
    pub gradient: GradientMode,
    /// Held-out samples per task for accuracy.
    pub eval_samples: usize,
    /// Features attributed to each task; defaults to `n_features / n_tasks`.
    pub features_per_task: Option<usize>,
    /// Depths visited by the depth sweep.
    pub depths: Vec<usize>,
    /// Probe counts visited by the probe sweep.
    pub probe_counts: Vec<usize>,
    pub crosscoder: CrosscoderSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seq = SequenceConfig::default();
        let train = TrainConfig::default();
        Self {
            scenario: seq.scenario,
            n_features: seq.n_features,
            m_dims: seq.m_dims,
            n_tasks: seq.n_tasks,
            n_samples: seq.n_samples,
            sparsity: seq.sparsity,
            seeds: (0..5).collect(),
            optimizer: train.optimizer,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            depth: seq.depth,
            probes_per_task: seq.probes_per_task,
            probe_mode: train.probe_mode,
            probe_lr: train.probe_lr,
            loss: train.loss,
            weight_decay: train.weight_decay,
            gradient: train.gradient,
            eval_samples: crate::metrics::EVAL_SAMPLES,
            features_per_task: None,
            depths: vec![1, 4, 8],
            probe_counts: vec![1, 2, 4],
            crosscoder: CrosscoderSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        toml::from_str(s).map_err(|e| ExperimentError::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply_profile(&mut self, profile: Profile) {
        match profile {
            Profile::Fast => {
                self.n_samples = 2000;
                self.epochs = 1000;
                self.seeds = (0..3).collect();
            }
            Profile::Paper => {
                self.n_samples = 20_000;
                self.epochs = 10_000;
                self.seeds = (0..5).collect();
            }
        }
    }

    pub fn with_profile(mut self, profile: Profile) -> Self {
        self.apply_profile(profile);
        self
    }

    pub fn features_per_task(&self) -> usize {
        self.features_per_task.unwrap_or((self.n_features / self.n_tasks.max(1)).max(1))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            loss: self.loss,
            probe_mode: self.probe_mode,
            probe_lr: self.probe_lr,
            gradient: self.gradient,
            adam: AdamParams::default(),
        }
    }

    pub fn sequence_config(&self, seed: u64, depth: usize, probes_per_task: usize) -> SequenceConfig {
        SequenceConfig {
            scenario: self.scenario,
            n_features: self.n_features,
            m_dims: self.m_dims,
            n_tasks: self.n_tasks,
            n_samples: self.n_samples,
            sparsity: self.sparsity,
            seed,
            depth,
            probes_per_task,
            train: self.train_config(),
        }
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        for (name, v) in [
            ("n_features", self.n_features),
            ("m_dims", self.m_dims),
            ("n_tasks", self.n_tasks),
            ("n_samples", self.n_samples),
            ("probes_per_task", self.probes_per_task),
            ("eval_samples", self.eval_samples),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.n_tasks < 2 {
            return bad("n_tasks must be at least 2 for forgetting to be defined".into());
        }
        if self.scenario == Scenario::Disjoint && !self.n_features.is_multiple_of(self.n_tasks) {
            return bad(format!("scenario none needs n_features ({}) divisible by n_tasks ({})", self.n_features, self.n_tasks));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return bad(format!("sparsity must lie in [0, 1), got {}", self.sparsity));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        for &d in std::iter::once(&self.depth).chain(&self.depths) {
            if !(1..=MAX_DEPTH).contains(&d) {
                return bad(format!("depth must lie in 1..={MAX_DEPTH}, got {d}"));
            }
        }
        if self.depths.is_empty() || self.probe_counts.is_empty() || self.probe_counts.contains(&0) {
            return bad("depths and probe_counts must be nonempty and probe counts at least 1".into());
        }
        if self.loss != LossKind::Mse {
            return bad("experiments use regression tasks; loss must be mse".into());
        }
        if self.features_per_task() == 0 || self.features_per_task() > self.n_features {
            return bad(format!("features_per_task must lie in 1..={}", self.n_features));
        }
        self.train_config().validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.crosscoder.enabled {
            if self.crosscoder.probe_samples == 0 || self.crosscoder.top_features == 0 {
                return bad("crosscoder probe_samples and top_features must be at least 1".into());
            }
            self.crosscoder.to_config(self.m_dims, 0).validate(self.m_dims).map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
