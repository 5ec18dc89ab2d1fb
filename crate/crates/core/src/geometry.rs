//! Geometry of a set of feature vectors: allocated capacity, pairwise overlap and readout.
//!
//! A [`FeatureMatrix`] holds one feature vector per column (`m` activation dimensions by `n`
//! features). Allocated capacity measures how exclusively a feature owns its direction:
//!
//! ```text
//! C_i = (φ_iᵀφ_i)² / Σ_j (φ_iᵀφ_j)²     if ‖φ_i‖ > 0, else 0
//! ```
//!
//! The denominator always includes `j = i`, so `0 ≤ C_i ≤ 1` and `C_i = 1` exactly when
//! `φ_i` is orthogonal to every other column.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Columns with a Euclidean norm below this are treated as absent.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("feature matrix must have at least one row and one column, got {rows}x{cols}")]
    Empty { rows: usize, cols: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// The `m × n` matrix `Φ = [φ_1, …, φ_n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix(DMatrix<f64>);

impl FeatureMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self, GeometryError> {
        let (rows, cols) = data.shape();
        if rows == 0 || cols == 0 {
            return Err(GeometryError::Empty { rows, cols });
        }
        for c in 0..cols {
            for r in 0..rows {
                if !data[(r, c)].is_finite() {
                    return Err(GeometryError::NonFinite { row: r, col: c });
                }
            }
        }
        Ok(Self(data))
    }

    pub fn from_row_slice(rows: usize, cols: usize, values: &[f64]) -> Result<Self, GeometryError> {
        if values.len() != rows * cols {
            return Err(GeometryError::DimensionMismatch { expected: rows * cols, actual: values.len() });
        }
        Self::new(DMatrix::from_row_slice(rows, cols, values))
    }

    /// Activation dimensions `m`.
    pub fn dims(&self) -> usize {
        self.0.nrows()
    }

    /// Number of features `n`.
    pub fn n_features(&self) -> usize {
        self.0.ncols()
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.0.column(i).into_owned()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn norms(&self) -> DVector<f64> {
        crate::linalg::column_norms(&self.0)
    }

    /// Copy with every nonzero column scaled to unit length; zero columns stay zero.
    pub fn unit_normalized(&self) -> FeatureMatrix {
        let mut out = self.0.clone();
        for mut col in out.column_iter_mut() {
            let norm = col.norm();
            if norm >= ZERO_NORM {
                col /= norm;
            } else {
                col.fill(0.0);
            }
        }
        FeatureMatrix(out)
    }

    /// Activation `a = Φ f`.
    pub fn activation(&self, f: &DVector<f64>) -> Result<DVector<f64>, GeometryError> {
        if f.len() != self.n_features() {
            return Err(GeometryError::DimensionMismatch { expected: self.n_features(), actual: f.len() });
        }
        Ok(&self.0 * f)
    }
}

/// A readout direction `r` of length `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutVector(DVector<f64>);

impl ReadoutVector {
    pub fn new(data: DVector<f64>) -> Result<Self, GeometryError> {
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite { row: i, col: 0 });
        }
        Ok(Self(data))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, GeometryError> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub(crate) fn as_vector_mut(&mut self) -> &mut DVector<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

/// Per-feature capacity, norm and overlap summary, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityReport {
    pub capacity: DVector<f64>,
    pub norms: DVector<f64>,
    /// `n × n` cosine similarities; rows and columns of zero features are 0.
    pub overlap: DMatrix<f64>,
    /// Capacity of the unit-normalised columns.
    pub normalized_capacity: DVector<f64>,
}

fn capacity_from_gram(gram: &DMatrix<f64>, nonzero: &[bool]) -> DVector<f64> {
    let n = gram.ncols();
    DVector::from_iterator(
        n,
        (0..n).map(|i| {
            if !nonzero[i] {
                return 0.0;
            }
            let own = gram[(i, i)];
            let denom: f64 = (0..n).map(|j| gram[(i, j)] * gram[(i, j)]).sum();
            if denom > 0.0 {
                own * own / denom
            } else {
                0.0
            }
        }),
    )
}

/// Allocated capacity `C_i`, normalised capacity `Ĉ_i`, norms and overlap in one pass.
pub fn allocated_capacity(phi: &FeatureMatrix) -> CapacityReport {
    let norms = phi.norms();
    let nonzero: Vec<bool> = norms.iter().map(|&n| n >= ZERO_NORM).collect();
    let gram = phi.as_matrix().tr_mul(phi.as_matrix());
    let capacity = capacity_from_gram(&gram, &nonzero);

    let unit = phi.unit_normalized();
    let unit_gram = unit.as_matrix().tr_mul(unit.as_matrix());
    let normalized_capacity = capacity_from_gram(&unit_gram, &nonzero);

    let overlap = cosine_from_gram(&gram, &norms, &nonzero);
    CapacityReport { capacity, norms, overlap, normalized_capacity }
}

fn cosine_from_gram(gram: &DMatrix<f64>, norms: &DVector<f64>, nonzero: &[bool]) -> DMatrix<f64> {
    let n = gram.ncols();
    DMatrix::from_fn(n, n, |i, j| {
        if nonzero[i] && nonzero[j] {
            if i == j {
                1.0
            } else {
                (gram[(i, j)] / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            }
        } else {
            0.0
        }
    })
}

/// Cosine similarity between every pair of features; 0 where either feature is zero.
pub fn overlap_matrix(phi: &FeatureMatrix) -> DMatrix<f64> {
    let norms = phi.norms();
    let nonzero: Vec<bool> = norms.iter().map(|&n| n >= ZERO_NORM).collect();
    let gram = phi.as_matrix().tr_mul(phi.as_matrix());
    cosine_from_gram(&gram, &norms, &nonzero)
}

/// Linear readout `rᵀa`.
pub fn feature_readout(r: &ReadoutVector, activation: &DVector<f64>) -> Result<f64, GeometryError> {
    if r.len() != activation.len() {
        return Err(GeometryError::DimensionMismatch { expected: r.len(), actual: activation.len() });
    }
    Ok(r.as_vector().dot(activation))
}
