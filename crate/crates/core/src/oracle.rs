//! Closed-form predictions for the feature-reader model.
//!
//! Every prediction here is evaluated against empirical (sample-mean) statistics, so it is an
//! exact statement about one full-batch step on that dataset rather than a population estimate.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::{FeatureMatrix, ReadoutVector};
use crate::linalg::{pinv, quad_form, LinalgError};
use crate::tasks::FeatureStats;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("both gradients vanish; load shares are undefined")]
    NoGradient,
    #[error("class {0} is listed as both old and new")]
    ClassOverlap(usize),
    #[error("class index {0} has no probe")]
    UnknownClass(usize),
    #[error("label second moment is zero; cannot normalize")]
    ZeroLabels,
}

fn shape(msg: String) -> OracleError {
    OracleError::Shape(msg)
}

/// `γᵢ = wᵀφᵢ`.
pub fn probe_sensitivity(probe: &ReadoutVector, phi: &FeatureMatrix) -> Result<DVector<f64>, OracleError> {
    let m = phi.dims();
    if probe.len() != m {
        return Err(shape(format!("probe of length {} for {m} dims", probe.len())));
    }
    Ok(phi.as_matrix().tr_mul(probe.as_vector()))
}

fn check_stats(stats: &FeatureStats, n: usize) -> Result<(), OracleError> {
    if stats.n_features() != n || stats.sigma.shape() != (n, n) {
        return Err(shape(format!("stats cover {} features, Φ has {n}", stats.n_features())));
    }
    Ok(())
}

/// Expected one-step update of every feature vector under a fixed probe.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdatePrediction {
    /// Column `i` is `Δφᵢ`.
    pub updates: DMatrix<f64>,
    /// `cᵢ = Σⱼ γⱼ Σᵢⱼ − βᵢ`.
    pub coefficients: DVector<f64>,
}

/// `Δφᵢ = −η (Σⱼ γⱼ Σᵢⱼ − βᵢ) w`.
pub fn expected_update_lemma1(stats: &FeatureStats, probe: &ReadoutVector, phi: &FeatureMatrix, lr: f64) -> Result<UpdatePrediction, OracleError> {
    let (m, n) = (phi.dims(), phi.n_features());
    check_stats(stats, n)?;
    let gamma = probe_sensitivity(probe, phi)?;
    let w = probe.as_vector();
    let mut coefficients = DVector::zeros(n);
    let mut updates = DMatrix::zeros(m, n);
    for i in 0..n {
        let mut c = -stats.beta_hat[i];
        for j in 0..n {
            c += gamma[j] * stats.sigma[(i, j)];
        }
        coefficients[i] = c;
        for r in 0..m {
            updates[(r, i)] = -lr * c * w[r];
        }
    }
    Ok(UpdatePrediction { updates, coefficients })
}

/// Loss increase on task A after moving from A's optimum to B's optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossChangePrediction {
    /// `w_Aᵀw_B / ‖w_B‖²`.
    pub alpha: f64,
    pub v_a: DVector<f64>,
    pub v_b: DVector<f64>,
    pub delta_loss: f64,
    /// `L_A` at `Φ = w_A v_Aᵀ / ‖w_A‖²`.
    pub loss_a_at_a_opt: f64,
    /// `L_A` at `Φ = w_B v_Bᵀ / ‖w_B‖²`.
    pub loss_a_at_b_opt: f64,
    /// Factor applied to task A's labels so that `mean(y_A²) = 1`.
    pub label_scale_a: f64,
    /// Same for task B.
    pub label_scale_b: f64,
}

/// Minimum-loss feature matrix for a fixed probe: `w vᵀ / ‖w‖²`.
pub fn optimal_features(probe: &ReadoutVector, v: &DVector<f64>) -> DMatrix<f64> {
    let w = probe.as_vector();
    w * v.transpose() / w.norm_squared()
}

/// `ΔL_A = ½ ‖α v_B − v_A‖²_{Σ_A}` with `v = Σ⁺β`. Both tasks' labels are rescaled to unit
/// second moment first.
pub fn loss_change_theorem1(
    stats_a: &FeatureStats,
    stats_b: &FeatureStats,
    probe_a: &ReadoutVector,
    probe_b: &ReadoutVector,
) -> Result<LossChangePrediction, OracleError> {
    let n = stats_a.n_features();
    check_stats(stats_b, n)?;
    check_stats(stats_a, n)?;
    if probe_a.len() != probe_b.len() {
        return Err(shape(format!("probe lengths {} and {}", probe_a.len(), probe_b.len())));
    }
    if stats_a.label_second_moment <= 0.0 || stats_b.label_second_moment <= 0.0 {
        return Err(OracleError::ZeroLabels);
    }
    let wb2 = probe_b.as_vector().norm_squared();
    if wb2 == 0.0 || probe_a.as_vector().norm_squared() == 0.0 {
        return Err(shape("zero probe".into()));
    }
    let label_scale_a = 1.0 / stats_a.label_second_moment.sqrt();
    let label_scale_b = 1.0 / stats_b.label_second_moment.sqrt();
    let a = stats_a.with_label_scale(label_scale_a);
    let b = stats_b.with_label_scale(label_scale_b);
    let v_a = pinv(&a.sigma)? * &a.beta_hat;
    let v_b = pinv(&b.sigma)? * &b.beta_hat;
    let alpha = probe_a.as_vector().dot(probe_b.as_vector()) / wb2;
    let diff = &v_b * alpha - &v_a;
    let delta_loss = 0.5 * quad_form(&a.sigma, &diff);
    let loss_a_at_a_opt = 0.5 * (1.0 - a.beta_hat.dot(&v_a));
    let loss_a_at_b_opt = 0.5 * (alpha * alpha * quad_form(&a.sigma, &v_b) - 2.0 * alpha * v_b.dot(&a.beta_hat) + 1.0);
    Ok(LossChangePrediction { alpha, v_a, v_b, delta_loss, loss_a_at_a_opt, loss_a_at_b_opt, label_scale_a, label_scale_b })
}

/// Gradients and their shares when probe and features are trained jointly.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSharing {
    pub grad_w: DVector<f64>,
    /// Column `i` is `∇_{φᵢ} L`.
    pub grad_phi: DMatrix<f64>,
    pub rho_w: f64,
    pub rho_phi: f64,
    /// First-order loss change of one joint step.
    pub predicted_delta_loss: f64,
}

/// Squared gradient norms below this are treated as an exact optimum.
pub const GRADIENT_FLOOR: f64 = 1e-24;

pub fn load_sharing_prediction(
    phi: &FeatureMatrix,
    probe: &ReadoutVector,
    stats: &FeatureStats,
    lr_w: f64,
    lr_phi: f64,
) -> Result<LoadSharing, OracleError> {
    let (m, n) = (phi.dims(), phi.n_features());
    check_stats(stats, n)?;
    let update = expected_update_lemma1(stats, probe, phi, 1.0)?;
    let c = &update.coefficients;
    let grad_w = phi.as_matrix() * c;
    let grad_phi = DMatrix::from_fn(m, n, |r, i| c[i] * probe.as_vector()[r]);
    let gw2 = grad_w.norm_squared();
    let gphi2 = grad_phi.norm_squared();
    let total = gw2 + gphi2;
    if total < GRADIENT_FLOOR {
        return Err(OracleError::NoGradient);
    }
    Ok(LoadSharing { grad_w, grad_phi, rho_w: gw2 / total, rho_phi: gphi2 / total, predicted_delta_loss: -lr_w * gw2 - lr_phi * gphi2 })
}

/// Feature gradient with a shared head split by class group. Both parts are in gradient
/// form: the step is `−η (learning + suppression)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedProbeUpdate {
    /// Contribution of the new task's classes.
    pub learning: DMatrix<f64>,
    /// Contribution of the old classes, whose targets are zero.
    pub suppression: DMatrix<f64>,
}

impl SharedProbeUpdate {
    pub fn total(&self) -> DMatrix<f64> {
        &self.learning + &self.suppression
    }
}

fn check_classes(n_probes: usize, old: &[usize], new: &[usize]) -> Result<(), OracleError> {
    for &c in old.iter().chain(new) {
        if c >= n_probes {
            return Err(OracleError::UnknownClass(c));
        }
    }
    if let Some(&c) = old.iter().find(|c| new.contains(c)) {
        return Err(OracleError::ClassOverlap(c));
    }
    Ok(())
}

fn probe_matrix(probes: &[ReadoutVector], m: usize) -> Result<(), OracleError> {
    match probes.iter().find(|p| p.len() != m) {
        Some(p) => Err(shape(format!("probe of length {} for {m} dims", p.len()))),
        None => Ok(()),
    }
}

/// Multi-output MSE on task B with old-class probes kept in the head.
///
/// `beta_new` has one column per entry of `new`: `β_{i,c} = mean(y_c fᵢ)`.
pub fn shared_probe_update(
    sigma_b: &DMatrix<f64>,
    beta_new: &DMatrix<f64>,
    probes: &[ReadoutVector],
    old: &[usize],
    new: &[usize],
    phi: &FeatureMatrix,
) -> Result<SharedProbeUpdate, OracleError> {
    let (m, n) = (phi.dims(), phi.n_features());
    check_classes(probes.len(), old, new)?;
    probe_matrix(probes, m)?;
    if sigma_b.shape() != (n, n) || beta_new.shape() != (n, new.len()) {
        return Err(shape(format!("Σ is {:?}, β is {:?} for {n} features and {} classes", sigma_b.shape(), beta_new.shape(), new.len())));
    }
    let term = |c: usize, beta: Option<DVector<f64>>| -> Result<DMatrix<f64>, OracleError> {
        let gamma = probe_sensitivity(&probes[c], phi)?;
        let w = probes[c].as_vector();
        let mut out = DMatrix::zeros(m, n);
        for i in 0..n {
            let mut k = beta.as_ref().map_or(0.0, |b| -b[i]);
            for j in 0..n {
                k += gamma[j] * sigma_b[(i, j)];
            }
            for r in 0..m {
                out[(r, i)] = k * w[r];
            }
        }
        Ok(out)
    };
    let mut learning = DMatrix::zeros(m, n);
    for (k, &c) in new.iter().enumerate() {
        learning += term(c, Some(beta_new.column(k).into_owned()))?;
    }
    let mut suppression = DMatrix::zeros(m, n);
    for &c in old {
        suppression += term(c, None)?;
    }
    Ok(SharedProbeUpdate { learning, suppression })
}

/// Feature gradient of the mean cross-entropy over a softmax head, split by class group.
///
/// `targets` is `N × |probes|` in probe order; old classes must have zero targets.
/// The per-class factor is `mean(p_c fᵢ) − mean(y_c fᵢ)`.
pub fn ce_update(
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    probes: &[ReadoutVector],
    old: &[usize],
    new: &[usize],
    phi: &FeatureMatrix,
) -> Result<SharedProbeUpdate, OracleError> {
    let (m, n) = (phi.dims(), phi.n_features());
    let k = probes.len();
    check_classes(k, old, new)?;
    probe_matrix(probes, m)?;
    if features.ncols() != n || targets.nrows() != features.nrows() || targets.ncols() != k || features.nrows() == 0 {
        return Err(shape(format!("features {:?}, targets {:?}, {k} probes", features.shape(), targets.shape())));
    }
    let rows = features.nrows();
    let gammas: Vec<DVector<f64>> = probes.iter().map(|p| probe_sensitivity(p, phi)).collect::<Result<_, _>>()?;
    // E[p_c fᵢ] and E[y_c fᵢ], accumulated sample by sample
    let mut pf = DMatrix::zeros(n, k);
    let mut yf = DMatrix::zeros(n, k);
    let mut logits = vec![0.0; k];
    for s in 0..rows {
        for c in 0..k {
            logits[c] = (0..n).map(|i| gammas[c][i] * features[(s, i)]).sum();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let mass: f64 = (0..k).map(|c| targets[(s, c)]).sum();
        for c in 0..k {
            let p = (logits[c] - max).exp() / z;
            for i in 0..n {
                pf[(i, c)] += mass * p * features[(s, i)];
                yf[(i, c)] += targets[(s, c)] * features[(s, i)];
            }
        }
    }
    pf /= rows as f64;
    yf /= rows as f64;
    let group = |classes: &[usize]| {
        let mut out = DMatrix::zeros(m, n);
        for &c in classes {
            let w = probes[c].as_vector();
            for i in 0..n {
                let f = pf[(i, c)] - yf[(i, c)];
                for r in 0..m {
                    out[(r, i)] += f * w[r];
                }
            }
        }
        out
    };
    Ok(SharedProbeUpdate { learning: group(new), suppression: group(old) })
}
