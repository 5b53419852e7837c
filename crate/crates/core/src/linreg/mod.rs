//! Least-squares kernels: OLS/WLS, logistic regression by IRLS, and feasible
//! GLS over stacked equation systems (optionally instrumented, which gives
//! three-stage least squares).

mod logistic;
mod ols;
mod system;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use logistic::{logistic, LogisticOptions};
pub use ols::ols;
pub use system::{fgls_system, instrumented_system, Equation, SystemEstimate, SystemOptions};

/// Relative threshold below which a triangular pivot marks a dependent column.
pub const SINGULARITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    /// Homoscedastic model-based covariance.
    #[default]
    Classical,
    /// Heteroscedasticity-robust sandwich (HC1 scaling).
    Robust,
}

/// Named design matrix (rows = observations).
#[derive(Debug, Clone, PartialEq)]
pub struct Design<T: Scalar> {
    pub matrix: DMatrix<T>,
    pub names: Vec<String>,
}

impl<T: Scalar> Design<T> {
    pub fn new(matrix: DMatrix<T>, names: Vec<String>) -> Result<Self> {
        if matrix.ncols() != names.len() {
            return Err(Error::Dimension(format!(
                "{} columns but {} names",
                matrix.ncols(),
                names.len()
            )));
        }
        Ok(Self { matrix, names })
    }

    /// Build from named columns of equal length.
    pub fn from_columns(columns: Vec<(String, Vec<T>)>) -> Result<Self> {
        let n = columns.first().map_or(0, |c| c.1.len());
        if columns.iter().any(|c| c.1.len() != n) {
            return Err(Error::Dimension("design columns differ in length".into()));
        }
        let k = columns.len();
        let matrix = DMatrix::from_fn(n, k, |i, j| columns[j].1[i]);
        let names = columns.into_iter().map(|c| c.0).collect();
        Ok(Self { matrix, names })
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Coefficients with covariance, residuals and fitted values.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T: Scalar> {
    pub names: Vec<String>,
    pub coefficients: DVector<T>,
    pub covariance: DMatrix<T>,
    /// `y - fitted` on the response scale.
    pub residuals: DVector<T>,
    /// Linear predictor for least squares, probabilities for logistic fits.
    pub fitted: DVector<T>,
    pub nobs: usize,
    pub covariance_kind: CovarianceKind,
}

impl<T: Scalar> FitResult<T> {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn coef(&self, name: &str) -> Option<T> {
        self.index_of(name).map(|j| self.coefficients[j])
    }

    pub fn std_error(&self, j: usize) -> T {
        self.covariance[(j, j)].max(T::zero()).sqrt()
    }

    pub fn std_errors(&self) -> DVector<T> {
        DVector::from_fn(self.coefficients.len(), |j, _| self.std_error(j))
    }

    /// Two-sided Wald p-value under the normal reference distribution.
    pub fn p_value(&self, j: usize) -> f64 {
        let z = (self.coefficients[j] / self.std_error(j)).as_f64().abs();
        two_sided_normal_p(z)
    }
}

pub(crate) fn two_sided_normal_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}

/// Validate weights and rescale the positive ones to mean 1.
///
/// Returns the normalized weights and the number of positive entries.
pub(crate) fn normalize_weights<T: Scalar>(
    w: Option<&DVector<T>>,
    n: usize,
) -> Result<(DVector<T>, usize)> {
    let Some(w) = w else {
        return Ok((DVector::from_element(n, T::one()), n));
    };
    if w.len() != n {
        return Err(Error::Dimension(format!(
            "{} weights for {n} observations",
            w.len()
        )));
    }
    if w.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
        return Err(Error::InvalidInput(
            "weights must be finite and nonnegative".into(),
        ));
    }
    let positive = w.iter().filter(|&&v| v > T::zero()).count();
    if positive == 0 {
        return Err(Error::EmptySample("all weights are zero".into()));
    }
    let mean = w.sum() / T::from_usize_lossy(positive);
    Ok((w.map(|v| v / mean), positive))
}

/// Weighted least-squares solve by Householder QR with a dependency check.
///
/// Returns `(beta, (X'WX)^-1)` for every column of `rhs`.
pub(crate) fn wls_solve<T: Scalar>(
    x: &DMatrix<T>,
    rhs: &DMatrix<T>,
    sqrt_w: &DVector<T>,
    names: &[String],
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let (n, k) = x.shape();
    if n < k {
        return Err(Error::Singular {
            columns: names[n..].to_vec(),
        });
    }
    let xs = DMatrix::from_fn(n, k, |i, j| x[(i, j)] * sqrt_w[i]);
    let ys = DMatrix::from_fn(n, rhs.ncols(), |i, j| rhs[(i, j)] * sqrt_w[i]);
    let col_norms: Vec<T> = (0..k).map(|j| xs.column(j).norm()).collect();
    let qr = xs.qr();
    let r = qr.r();
    // 1e-10 in double precision; scaled up for narrower types
    let tol = T::lit(SINGULARITY_TOL).max(T::eps() * T::lit(100.0));
    let dependent: Vec<String> = (0..k)
        .filter(|&j| r[(j, j)].abs() <= tol * col_norms[j] || col_norms[j] == T::zero())
        .map(|j| names[j].clone())
        .collect();
    if !dependent.is_empty() {
        return Err(Error::Singular { columns: dependent });
    }
    let qty = qr.q().transpose() * ys;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular {
            columns: names.to_vec(),
        })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::Singular {
            columns: names.to_vec(),
        })?;
    let xtwx_inv = &r_inv * r_inv.transpose();
    Ok((beta, xtwx_inv))
}

/// Symmetrize in place (removes rounding asymmetry from sandwich products).
pub(crate) fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
