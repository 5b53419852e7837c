use nalgebra::{DMatrix, DVector};

use super::{normalize_weights, symmetrize, wls_solve, CovarianceKind, Design, FitResult};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ordinary (or weighted) least squares.
///
/// Weights are rescaled to mean one over their positive entries, so any
/// constant weight vector reproduces the unweighted fit. Rows with zero
/// weight keep their residuals but do not count towards degrees of freedom.
pub fn ols<T: Scalar>(
    design: &Design<T>,
    y: &DVector<T>,
    weights: Option<&DVector<T>>,
    covariance: CovarianceKind,
) -> Result<FitResult<T>> {
    let (n, k) = (design.nrows(), design.ncols());
    if y.len() != n {
        return Err(Error::Dimension(format!(
            "y has {} rows, design {n}",
            y.len()
        )));
    }
    let (w, n_pos) = normalize_weights(weights, n)?;
    let sqrt_w = w.map(|v| v.sqrt());
    let rhs = DMatrix::from_column_slice(n, 1, y.as_slice());
    let (beta, xtwx_inv) = wls_solve(&design.matrix, &rhs, &sqrt_w, &design.names)?;
    let beta = beta.column(0).into_owned();
    let fitted = &design.matrix * &beta;
    let residuals = y - &fitted;

    if n_pos <= k {
        return Err(Error::InvalidInput(format!(
            "no residual degrees of freedom ({n_pos} weighted observations, {k} coefficients)"
        )));
    }
    let dof = T::from_usize_lossy(n_pos - k);
    let mut cov = match covariance {
        CovarianceKind::Classical => {
            let rss = residuals
                .iter()
                .zip(w.iter())
                .fold(T::zero(), |acc, (&e, &wi)| acc + wi * e * e);
            &xtwx_inv * (rss / dof)
        }
        CovarianceKind::Robust => {
            let mut meat = DMatrix::zeros(k, k);
            for i in 0..n {
                let s = w[i] * residuals[i];
                if s == T::zero() {
                    continue;
                }
                let xi = design.matrix.row(i).transpose();
                meat.ger(s * s, &xi, &xi, T::one());
            }
            let scale = T::from_usize_lossy(n_pos) / dof;
            &xtwx_inv * meat * &xtwx_inv * scale
        }
    };
    symmetrize(&mut cov);

    Ok(FitResult {
        names: design.names.clone(),
        coefficients: beta,
        covariance: cov,
        residuals,
        fitted,
        nobs: n,
        covariance_kind: covariance,
    })
}
