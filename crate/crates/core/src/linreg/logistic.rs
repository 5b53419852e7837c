use nalgebra::{DMatrix, DVector};

use super::{symmetrize, CovarianceKind, Design, FitResult};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct LogisticOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the sup-norm of the score `X'(y - p)`.
    pub gradient_tol: f64,
    /// Coefficient norm taken as evidence of separation.
    pub divergence_norm: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_tol: 1e-8,
            divergence_norm: 1e4,
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(eta: T) -> T {
    if eta >= T::zero() {
        T::one() / (T::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (T::one() + e)
    }
}

fn log_likelihood<T: Scalar>(eta: &DVector<T>, y: &[bool]) -> T {
    // log(1 + exp(eta)) computed stably
    eta.iter().zip(y).fold(T::zero(), |acc, (&e, &yi)| {
        let softplus = if e > T::zero() {
            e + (-e).exp().ln_1p()
        } else {
            e.exp().ln_1p()
        };
        acc + if yi { e - softplus } else { -softplus }
    })
}

/// Maximum-likelihood logistic regression by iteratively reweighted least squares.
///
/// The returned covariance is the inverse observed information, `fitted` holds
/// the probabilities and `residuals` the response residuals `y - p`.
pub fn logistic<T: Scalar>(
    design: &Design<T>,
    y: &[bool],
    opts: LogisticOptions,
) -> Result<FitResult<T>> {
    let (n, k) = (design.nrows(), design.ncols());
    if y.len() != n {
        return Err(Error::Dimension(format!(
            "y has {} rows, design {n}",
            y.len()
        )));
    }
    let ones = y.iter().filter(|&&v| v).count();
    if ones == 0 || ones == n {
        return Err(Error::Separation(format!(
            "outcome is constant ({ones} of {n} equal to 1); the MLE lies on the boundary"
        )));
    }
    // validates rank before iterating
    super::wls_solve(
        &design.matrix,
        &DMatrix::zeros(n, 1),
        &DVector::from_element(n, T::one()),
        &design.names,
    )?;

    let x = &design.matrix;
    let yv = DVector::from_iterator(n, y.iter().map(|&v| if v { T::one() } else { T::zero() }));
    let tol = T::lit(opts.gradient_tol).max(T::eps() * T::lit(1e3) * T::from_usize_lossy(n));
    let mut beta = DVector::<T>::zeros(k);
    let mut eta = x * &beta;
    let mut ll = log_likelihood(&eta, y);

    for iter in 0..=opts.max_iterations {
        let p = eta.map(sigmoid);
        let score = x.transpose() * (&yv - &p);
        let grad = score.amax();
        let w = p.map(|pi| pi * (T::one() - pi));
        let mut info = DMatrix::<T>::zeros(k, k);
        for i in 0..n {
            let xi = x.row(i).transpose();
            info.ger(w[i], &xi, &xi, T::one());
        }
        let chol = info.clone().cholesky().ok_or_else(|| {
            Error::Separation(
                "information matrix is singular; fitted probabilities reached 0 or 1".into(),
            )
        })?;

        if grad <= tol {
            let edge = T::eps() * T::lit(10.0);
            if p.iter().any(|&pi| pi <= edge || pi >= T::one() - edge) {
                return Err(Error::Separation(
                    "fitted probabilities numerically 0 or 1; outcome is (quasi-)perfectly predicted".into(),
                ));
            }
            let mut cov = chol.inverse();
            symmetrize(&mut cov);
            return Ok(FitResult {
                names: design.names.clone(),
                coefficients: beta,
                covariance: cov,
                residuals: &yv - &p,
                fitted: p,
                nobs: n,
                covariance_kind: CovarianceKind::Classical,
            });
        }
        if iter == opts.max_iterations {
            return Err(Error::NoConvergence {
                iterations: iter,
                score: grad.as_f64(),
            });
        }

        let step = chol.solve(&score);
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + &step * t;
            let cand_eta = x * &cand;
            let cand_ll = log_likelihood(&cand_eta, y);
            if cand_ll >= ll - T::lit(1e-12) * ll.abs().max(T::one()) {
                beta = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= T::lit(0.5);
        }
        if !accepted {
            return Err(Error::NoConvergence {
                iterations: iter + 1,
                score: grad.as_f64(),
            });
        }
        if beta.norm() > T::lit(opts.divergence_norm) {
            return Err(Error::Separation(format!(
                "coefficient norm exceeded {} after {} iterations; outcome is perfectly predicted",
                opts.divergence_norm,
                iter + 1
            )));
        }
    }
    unreachable!("loop returns on the final iteration")
}
