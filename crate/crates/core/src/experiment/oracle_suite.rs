//! Randomised comparison of every closed-form prediction against the trainer.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::geometry::{FeatureMatrix, ReadoutVector};
use crate::oracle::{ce_update, expected_update_lemma1, load_sharing_prediction, loss_change_theorem1, optimal_features, shared_probe_update};
use crate::reader::{
    loss_and_gradients, train_task, Encoder, FeatureReader, GradientMode, LossKind, OptimizerKind, Probe, ProbeBank, ProbeMode, TaskData, TrainConfig,
};
use crate::rng::{self, tag, Rng};
use crate::tasks::{estimate_stats, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteSettings {
    pub seed: u64,
    pub instances: usize,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        Self { seed: 0, instances: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub instances: usize,
    /// Instances meeting the per-instance tolerance.
    pub passed_instances: usize,
    /// Instances that must pass for the check to pass.
    pub required: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub note: String,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.passed_instances >= self.required
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub settings: SuiteSettings,
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(OracleCheck::passed)
    }

    /// One line per check.
    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| {
                format!(
                    "{} {:<16} {}/{} within {:.0e} (need {}), max error {:.3e}{}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.passed_instances,
                    c.instances,
                    c.tolerance,
                    c.required,
                    c.max_error,
                    if c.note.is_empty() { String::new() } else { format!("; {}", c.note) }
                )
            })
            .collect()
    }
}

fn gaussian(g: &mut Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| std * g.sample::<f64, _>(StandardNormal))
}

fn sparse_features(g: &mut Rng, rows: usize, n: usize) -> DMatrix<f64> {
    let p: f64 = g.gen_range(0.3..0.9);
    DMatrix::from_fn(rows, n, |_, _| if g.gen::<f64>() < p { g.gen::<f64>() } else { 0.0 })
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_abs(&(a - b)) / max_abs(b).max(1e-300)
}

fn model(phi: DMatrix<f64>, probes: &[DVector<f64>], fixed: bool) -> FeatureReader {
    let bank = ProbeBank::new(
        probes.iter().enumerate().map(|(k, v)| Probe { vector: ReadoutVector::new(v.clone()).expect("finite"), fixed, task: k }).collect(),
    );
    FeatureReader::new(Encoder::new(vec![phi]).expect("one layer"), bank).expect("shapes agree")
}

fn plain_gd(lr: f64, probe_mode: ProbeMode, gradient: GradientMode) -> TrainConfig {
    TrainConfig { optimizer: OptimizerKind::PlainGd, learning_rate: lr, epochs: 1, probe_mode, probe_lr: lr, gradient, ..TrainConfig::default() }
}

fn lemma1_instance(g: &mut Rng) -> f64 {
    let m = g.gen_range(2..=8);
    let n = g.gen_range(2..=12);
    let rows = g.gen_range(20..=500);
    let phi = gaussian(g, m, n, 1.0 / (n as f64).sqrt());
    let w = gaussian(g, m, 1, 1.0 / (m as f64).sqrt()).column(0).into_owned();
    let features = sparse_features(g, rows, n);
    let labels = &features * gaussian(g, n, 1, 1.0).column(0) + gaussian(g, rows, 1, 0.1).column(0);
    let ds = Dataset { features: features.clone(), labels: labels.clone() };
    let lr = g.gen_range(0.001..0.1);
    let stats = estimate_stats(&ds).expect("nonempty");
    let pred = expected_update_lemma1(&stats, &ReadoutVector::new(w.clone()).unwrap(), &FeatureMatrix::new(phi.clone()).unwrap(), lr).unwrap();
    let mut mdl = model(phi.clone(), &[w], true);
    let data = TaskData::new(features, DMatrix::from_column_slice(rows, 1, labels.as_slice())).unwrap();
    train_task(&mut mdl, &[0], &data, &plain_gd(lr, ProbeMode::Fixed, GradientMode::Samples)).unwrap();
    rel(&pred.updates, &(mdl.encoder.product() - phi))
}

fn theorem1_instance(g: &mut Rng) -> (f64, f64) {
    let m = g.gen_range(2..=6);
    let n = g.gen_range(2..=8);
    let rows = 500;
    let draw = |g: &mut Rng| {
        let f = sparse_features(g, rows, n);
        let y = &f * gaussian(g, n, 1, 1.0).column(0);
        Dataset { features: f, labels: y }
    };
    let (a, b) = (draw(g), draw(g));
    let wa = gaussian(g, m, 1, 1.0).column(0).into_owned();
    let wb = gaussian(g, m, 1, 1.0).column(0).into_owned();
    let (pa, pb) = (ReadoutVector::new(wa.clone()).unwrap(), ReadoutVector::new(wb).unwrap());
    let pred = loss_change_theorem1(&estimate_stats(&a).unwrap(), &estimate_stats(&b).unwrap(), &pa, &pb).unwrap();
    // direct evaluation of task A's loss, labels scaled to unit second moment
    let loss_a = |phi: &DMatrix<f64>| {
        let pred_y = &a.features * phi.transpose() * &wa;
        0.5 * (pred_y - &a.labels * pred.label_scale_a).norm_squared() / rows as f64
    };
    let direct = loss_a(&optimal_features(&pb, &pred.v_b)) - loss_a(&optimal_features(&pa, &pred.v_a));
    ((pred.delta_loss - direct).abs(), pred.delta_loss)
}

/// Error of the first-order prediction at `η` and `η/2`.
fn load_sharing_instance(g: &mut Rng) -> f64 {
    let m = g.gen_range(2..=8);
    let n = g.gen_range(2..=12);
    let rows = g.gen_range(50..=500);
    let phi = gaussian(g, m, n, 1.0 / (n as f64).sqrt());
    let w = gaussian(g, m, 1, 1.0 / (m as f64).sqrt()).column(0).into_owned();
    let features = sparse_features(g, rows, n);
    let labels = &features * gaussian(g, n, 1, 1.0).column(0);
    let ds = Dataset { features: features.clone(), labels: labels.clone() };
    let stats = estimate_stats(&ds).unwrap();
    let data = TaskData::new(features, DMatrix::from_column_slice(rows, 1, labels.as_slice())).unwrap();
    let eta = 1e-3;
    let err = |lr: f64| {
        let pred = load_sharing_prediction(&FeatureMatrix::new(phi.clone()).unwrap(), &ReadoutVector::new(w.clone()).unwrap(), &stats, lr, lr)
            .unwrap()
            .predicted_delta_loss;
        let mut mdl = model(phi.clone(), std::slice::from_ref(&w), false);
        let trace = train_task(&mut mdl, &[0], &data, &plain_gd(lr, ProbeMode::Coadapt, GradientMode::Samples)).unwrap();
        ((trace.losses[1] - trace.losses[0]) - pred).abs()
    };
    err(eta) / err(eta / 2.0)
}

struct MultiClass {
    phi: DMatrix<f64>,
    probes: Vec<DVector<f64>>,
    features: DMatrix<f64>,
    old: Vec<usize>,
    new: Vec<usize>,
}

fn multiclass(g: &mut Rng, orthogonal_old: bool) -> MultiClass {
    let k = g.gen_range(3..=5);
    let n_old = g.gen_range(1..k);
    let m = g.gen_range(n_old + 2..=n_old + 6);
    let n = g.gen_range(2..=10);
    let rows = g.gen_range(30..=300);
    let mut phi = gaussian(g, m, n, 1.0 / (n as f64).sqrt());
    let mut probes: Vec<DVector<f64>> = (0..k).map(|_| gaussian(g, m, 1, 1.0 / (m as f64).sqrt()).column(0).into_owned()).collect();
    if orthogonal_old {
        // old probes live on the first n_old coordinates, which no feature uses
        for p in probes.iter_mut().take(n_old) {
            for r in n_old..m {
                p[r] = 0.0;
            }
        }
        phi.rows_mut(0, n_old).fill(0.0);
    }
    MultiClass { phi, probes, features: sparse_features(g, rows, n), old: (0..n_old).collect(), new: (n_old..k).collect() }
}

fn readouts(v: &[DVector<f64>]) -> Vec<ReadoutVector> {
    v.iter().map(|p| ReadoutVector::new(p.clone()).unwrap()).collect()
}

fn shared_mse_instance(g: &mut Rng) -> (f64, f64) {
    let mc = multiclass(g, false);
    let rows = mc.features.nrows();
    let k = mc.probes.len();
    let mut targets = DMatrix::zeros(rows, k);
    for &c in &mc.new {
        targets.set_column(c, &gaussian(g, rows, 1, 1.0).column(0));
    }
    let n = rows as f64;
    let sigma = mc.features.tr_mul(&mc.features) / n;
    let beta_new = DMatrix::from_fn(mc.features.ncols(), mc.new.len(), |i, j| mc.features.column(i).dot(&targets.column(mc.new[j])) / n);
    let phi_fm = FeatureMatrix::new(mc.phi.clone()).unwrap();
    let analytic = shared_probe_update(&sigma, &beta_new, &readouts(&mc.probes), &mc.old, &mc.new, &phi_fm).unwrap();
    let mdl = model(mc.phi.clone(), &mc.probes, true);
    let head: Vec<usize> = (0..k).collect();
    let data = TaskData::new(mc.features.clone(), targets).unwrap();
    let empirical = loss_and_gradients(&mdl, &head, &data, LossKind::Mse, GradientMode::Samples).unwrap();

    let orth = multiclass(g, true);
    let rows = orth.features.nrows();
    let sigma = orth.features.tr_mul(&orth.features) / rows as f64;
    let beta_new = gaussian(g, orth.features.ncols(), orth.new.len(), 1.0);
    let split =
        shared_probe_update(&sigma, &beta_new, &readouts(&orth.probes), &orth.old, &orth.new, &FeatureMatrix::new(orth.phi).unwrap()).unwrap();
    (rel(&analytic.total(), &empirical.phi), max_abs(&split.suppression))
}

fn ce_instance(g: &mut Rng) -> f64 {
    let mc = multiclass(g, false);
    let rows = mc.features.nrows();
    let k = mc.probes.len();
    let mut targets = DMatrix::zeros(rows, k);
    for r in 0..rows {
        targets[(r, mc.new[g.gen_range(0..mc.new.len())])] = 1.0;
    }
    let analytic = ce_update(&mc.features, &targets, &readouts(&mc.probes), &mc.old, &mc.new, &FeatureMatrix::new(mc.phi.clone()).unwrap()).unwrap();
    let mdl = model(mc.phi, &mc.probes, true);
    let head: Vec<usize> = (0..k).collect();
    let data = TaskData::new(mc.features, targets).unwrap();
    let empirical = loss_and_gradients(&mdl, &head, &data, LossKind::CrossEntropy, GradientMode::Samples).unwrap();
    rel(&analytic.total(), &empirical.phi)
}

fn stream(settings: &SuiteSettings, check: u64, i: usize) -> Rng {
    rng::stream(settings.seed, &[tag::ORACLE, check, i as u64])
}

fn tally(name: &str, errors: &[f64], tolerance: f64, required: usize, note: String) -> OracleCheck {
    OracleCheck {
        name: name.to_string(),
        instances: errors.len(),
        passed_instances: errors.iter().filter(|&&e| e < tolerance).count(),
        required,
        max_error: errors.iter().cloned().fold(0.0, f64::max),
        tolerance,
        note,
    }
}

/// Runs every check on `settings.instances` random instances each.
pub fn run_oracle_suite(settings: SuiteSettings, exec: Execution) -> OracleReport {
    let n = settings.instances;
    let all = n;
    let mut checks = Vec::new();

    let e = exec.map_range(n, |i| lemma1_instance(&mut stream(&settings, 1, i)));
    checks.push(tally("lemma1", &e, 1e-9, all, String::new()));

    let t = exec.map_range(n, |i| theorem1_instance(&mut stream(&settings, 2, i)));
    let errs: Vec<f64> = t.iter().map(|p| p.0).collect();
    let min_delta = t.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let mut th = tally("theorem1", &errs, 1e-8, all, format!("min predicted change {min_delta:.3e}"));
    if min_delta < -1e-10 {
        th.passed_instances = t.iter().filter(|p| p.0 < 1e-8 && p.1 >= -1e-10).count();
    }
    checks.push(th);

    let ratios = exec.map_range(n, |i| load_sharing_instance(&mut stream(&settings, 3, i)));
    let at_least_four = ratios.iter().filter(|&&r| r >= 4.0).count();
    let near_four = ratios.iter().filter(|&&r| (3.5..=4.5).contains(&r)).count();
    let mut mean_ratio = ratios.iter().sum::<f64>() / n.max(1) as f64;
    if !mean_ratio.is_finite() {
        mean_ratio = f64::NAN;
    }
    checks.push(OracleCheck {
        name: "load_sharing".into(),
        instances: n,
        passed_instances: at_least_four,
        required: (95 * n).div_ceil(100),
        // reported as the worst shortfall below 4
        max_error: ratios.iter().map(|r| (4.0 - r).max(0.0)).fold(0.0, f64::max),
        tolerance: 4.0,
        note: format!("error ratio on halving η: mean {mean_ratio:.4}, {near_four}/{n} within [3.5, 4.5]"),
    });

    let s = exec.map_range(n, |i| shared_mse_instance(&mut stream(&settings, 4, i)));
    let errs: Vec<f64> = s.iter().map(|p| p.0).collect();
    checks.push(tally("shared_probe_mse", &errs, 1e-10, all, String::new()));
    let supp: Vec<f64> = s.iter().map(|p| p.1).collect();
    checks.push(OracleCheck {
        name: "suppression_zero".into(),
        instances: n,
        passed_instances: supp.iter().filter(|&&v| v == 0.0).count(),
        required: all,
        max_error: supp.iter().cloned().fold(0.0, f64::max),
        tolerance: 0.0,
        note: "old-class probes orthogonal to every feature".into(),
    });

    let c = exec.map_range(n, |i| ce_instance(&mut stream(&settings, 5, i)));
    checks.push(tally("cross_entropy", &c, 1e-10, all, String::new()));

    OracleReport { settings, checks }
}
