//! Feature-level model of catastrophic forgetting.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] — allocated capacity, overlap and readout on a set of feature vectors.
//! * [`tasks`] — synthetic continual-learning task sequences and their feature statistics.
//! * [`reader`] — the trainable feature-reader model `ŷ = wᵀ Φ f` (optionally deep) and its trainer.
//! * [`oracle`] — closed-form predictions for feature updates and loss changes.
//! * [`metrics`] — per-task metric series and ratio-based forgetting scores.
//! * [`crosscoder`] — TopK sparse autoencoder / crosscoder for tracking features across snapshots.
//! * [`experiment`] — configuration, runners, persistence and reporting used by the CLI.
//!
//! Data-parallel loops (seeds, sweep points, oracle instances, batch encoding) go through
//! [`exec`], which uses rayon when the `parallel` feature is enabled and falls back to plain
//! iteration otherwise. Results are identical in both modes.

pub mod crosscoder;
pub mod exec;
pub mod experiment;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod reader;
pub mod rng;
pub mod tasks;

pub use geometry::{allocated_capacity, feature_readout, overlap_matrix, CapacityReport, FeatureMatrix, ReadoutVector};
pub use tasks::{estimate_stats, make_task_sequence, sample_dataset, sample_eval_dataset, Dataset, FeatureStats, Scenario, TaskSpec};
