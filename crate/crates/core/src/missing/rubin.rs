use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cea::Z_975;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Estimates combined across imputations.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEstimate<T: Scalar> {
    /// Mean of the per-imputation estimates.
    pub estimate: DVector<T>,
    /// Mean within-imputation covariance.
    pub within: DMatrix<T>,
    /// Between-imputation covariance of the estimates.
    pub between: DMatrix<T>,
    /// `within + (1 + 1/M) between`.
    pub total: DMatrix<T>,
    /// Classical large-sample degrees of freedom per component (infinite
    /// when the between variance is zero).
    pub df: Vec<f64>,
    pub m: usize,
}

impl<T: Scalar> PooledEstimate<T> {
    pub fn std_error(&self, j: usize) -> T {
        self.total[(j, j)].max(T::zero()).sqrt()
    }

    /// 95% interval using the t reference distribution with `df[j]`.
    pub fn interval(&self, j: usize) -> [T; 2] {
        let q = t_quantile_975(self.df[j]);
        let h = T::lit(q) * self.std_error(j);
        [self.estimate[j] - h, self.estimate[j] + h]
    }
}

pub(crate) fn t_quantile_975(df: f64) -> f64 {
    if !df.is_finite() || df > 1e7 {
        return Z_975;
    }
    StudentsT::new(0.0, 1.0, df)
        .map(|t| t.inverse_cdf(0.975))
        .unwrap_or(Z_975)
}

/// Rubin's rules over `M >= 2` estimates and their covariances.
pub fn rubin_pool<T: Scalar>(
    estimates: &[DVector<T>],
    covariances: &[DMatrix<T>],
) -> Result<PooledEstimate<T>> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::InvalidInput(format!(
            "pooling needs at least 2 imputations, got {m}; no between-imputation variance"
        )));
    }
    if covariances.len() != m {
        return Err(Error::Dimension(format!(
            "{m} estimates but {} covariances",
            covariances.len()
        )));
    }
    let p = estimates[0].len();
    if estimates.iter().any(|e| e.len() != p) || covariances.iter().any(|c| c.shape() != (p, p)) {
        return Err(Error::Dimension(
            "imputation estimates are not conformable".into(),
        ));
    }
    let mf = T::from_usize_lossy(m);
    let estimate = estimates.iter().fold(DVector::zeros(p), |a, e| a + e) / mf;
    let within = covariances.iter().fold(DMatrix::zeros(p, p), |a, c| a + c) / mf;
    let mut between = DMatrix::<T>::zeros(p, p);
    for e in estimates {
        let d = e - &estimate;
        between += &d * d.transpose();
    }
    between /= T::from_usize_lossy(m - 1);
    let inflate = T::one() + T::one() / mf;
    let total = &within + &between * inflate;
    let df = (0..p)
        .map(|j| {
            let b = (between[(j, j)] * inflate).as_f64();
            if b <= 0.0 {
                f64::INFINITY
            } else {
                let r = within[(j, j)].as_f64() / b;
                (m - 1) as f64 * (1.0 + r) * (1.0 + r)
            }
        })
        .collect();
    Ok(PooledEstimate {
        estimate,
        within,
        between,
        total,
        df,
        m,
    })
}

/// Rubin's rules for a scalar quantity.
pub fn rubin_pool_scalar<T: Scalar>(estimates: &[T], variances: &[T]) -> Result<PooledEstimate<T>> {
    let e: Vec<DVector<T>> = estimates
        .iter()
        .map(|&v| DVector::from_element(1, v))
        .collect();
    let c: Vec<DMatrix<T>> = variances
        .iter()
        .map(|&v| DMatrix::from_element(1, 1, v))
        .collect();
    rubin_pool(&e, &c)
}
