//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("SVD did not converge for a {rows}x{cols} matrix")]
    SvdFailed { rows: usize, cols: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Relative singular-value cutoff; the absolute cutoff is `max(rows, cols) · σ_max · PINV_RCOND`.
pub const PINV_RCOND: f64 = 1e-12;

/// Moore–Penrose pseudoinverse through the SVD.
///
/// Singular values at or below `max(rows, cols) · σ_max · 1e-12` are treated as zero.
pub fn pinv(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let (rows, cols) = a.shape();
    if a.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    if rows == 0 || cols == 0 {
        return Ok(DMatrix::zeros(cols, rows));
    }
    let svd = nalgebra::linalg::SVD::try_new(a.clone(), true, true, f64::EPSILON, 10_000).ok_or(LinalgError::SvdFailed { rows, cols })?;
    let u = svd.u.as_ref().ok_or(LinalgError::SvdFailed { rows, cols })?;
    let v_t = svd.v_t.as_ref().ok_or(LinalgError::SvdFailed { rows, cols })?;
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rows.max(cols) as f64 * sigma_max * PINV_RCOND;

    let mut out = DMatrix::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        // out += v_k · u_kᵀ / s_k
        let vk = v_t.row(k).transpose();
        let uk = u.column(k);
        out.ger(inv, &vk, &uk, 1.0);
    }
    Ok(out)
}

/// `xᵀ A x`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x))
}

/// Product of a chain of matrices applied right-to-left: `ms[last] ⋯ ms[0]`.
/// Returns `None` for an empty chain.
pub fn chain_product(ms: &[DMatrix<f64>]) -> Option<DMatrix<f64>> {
    let mut it = ms.iter();
    let first = it.next()?.clone();
    Some(it.fold(first, |acc, m| m * acc))
}

/// Column-wise Euclidean norms.
pub fn column_norms(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(a.ncols(), a.column_iter().map(|c| c.norm()))
}
