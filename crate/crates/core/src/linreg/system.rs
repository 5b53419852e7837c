use nalgebra::{DMatrix, DVector};

use super::{normalize_weights, symmetrize, wls_solve, CovarianceKind, Design};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One equation of a stacked system.
#[derive(Debug, Clone)]
pub struct Equation<T: Scalar> {
    pub name: String,
    pub design: Design<T>,
    pub y: DVector<T>,
}

impl<T: Scalar> Equation<T> {
    pub fn new(name: impl Into<String>, design: Design<T>, y: DVector<T>) -> Self {
        Self {
            name: name.into(),
            design,
            y,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SystemOptions {
    pub covariance: CovarianceKind,
    /// Iterate FGLS to convergence instead of the one-step Zellner estimator.
    pub iterate: bool,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for SystemOptions {
    fn default() -> Self {
        Self {
            covariance: CovarianceKind::Classical,
            iterate: false,
            max_iterations: 100,
            tolerance: 1e-10,
        }
    }
}

/// Stacked coefficients with the full cross-equation covariance.
#[derive(Debug, Clone)]
pub struct SystemEstimate<T: Scalar> {
    pub equation_names: Vec<String>,
    /// Regressor names per equation.
    pub names: Vec<Vec<String>>,
    /// Start of each equation's block in `coefficients`.
    pub offsets: Vec<usize>,
    pub coefficients: DVector<T>,
    pub covariance: DMatrix<T>,
    /// Estimated (or supplied) residual covariance, sigma_{ll'}.
    pub residual_cov: DMatrix<T>,
    /// Structural residuals per equation (using the observed regressors).
    pub residuals: Vec<DVector<T>>,
    pub nobs: usize,
    pub iterations: usize,
    pub covariance_kind: CovarianceKind,
    /// Per-observation estimating-function contributions (rows = observations).
    pub scores: DMatrix<T>,
    /// Inverse of the stacked weighted cross-product matrix.
    pub bread: DMatrix<T>,
    /// HC1 small-sample factor applied to the robust covariance.
    pub hc_scale: T,
}

impl<T: Scalar> SystemEstimate<T> {
    pub fn n_equations(&self) -> usize {
        self.offsets.len()
    }

    pub fn block(&self, eq: usize) -> DVector<T> {
        let k = self.names[eq].len();
        self.coefficients.rows(self.offsets[eq], k).into_owned()
    }

    /// Global index of `name` in equation `eq`.
    pub fn index_of(&self, eq: usize, name: &str) -> Option<usize> {
        self.names[eq]
            .iter()
            .position(|n| n == name)
            .map(|j| self.offsets[eq] + j)
    }

    pub fn coef(&self, eq: usize, name: &str) -> Option<T> {
        self.index_of(eq, name).map(|j| self.coefficients[j])
    }
}

/// Feasible GLS for seemingly unrelated regressions.
///
/// With `residual_cov = None` each equation is first fitted by OLS and
/// sigma_{ll'} is estimated from the residuals (divisor
/// `sqrt((n - k_l)(n - k_l'))`); the stacked GLS problem is then solved with
/// that estimate.
pub fn fgls_system<T: Scalar>(
    equations: &[Equation<T>],
    residual_cov: Option<&DMatrix<T>>,
    weights: Option<&DVector<T>>,
    opts: SystemOptions,
) -> Result<SystemEstimate<T>> {
    system_estimate(equations, None, residual_cov, weights, opts)
}

/// Three-stage least squares: every equation is instrumented by the shared
/// instrument matrix (which must include the exogenous regressors).
///
/// Stage one is equation-by-equation 2SLS; its residuals give sigma_{ll'};
/// stage three solves the vertically stacked system by FGLS.
pub fn instrumented_system<T: Scalar>(
    equations: &[Equation<T>],
    instruments: &Design<T>,
    residual_cov: Option<&DMatrix<T>>,
    weights: Option<&DVector<T>>,
    opts: SystemOptions,
) -> Result<SystemEstimate<T>> {
    system_estimate(equations, Some(instruments), residual_cov, weights, opts)
}

fn system_estimate<T: Scalar>(
    equations: &[Equation<T>],
    instruments: Option<&Design<T>>,
    residual_cov: Option<&DMatrix<T>>,
    weights: Option<&DVector<T>>,
    opts: SystemOptions,
) -> Result<SystemEstimate<T>> {
    let m = equations.len();
    if m == 0 {
        return Err(Error::InvalidInput("system has no equations".into()));
    }
    let n = equations[0].y.len();
    for eq in equations {
        if eq.y.len() != n || eq.design.nrows() != n {
            return Err(Error::Dimension(format!(
                "equation '{}' does not share the {n} observations of the system",
                eq.name
            )));
        }
    }
    if let Some(s) = residual_cov {
        if s.shape() != (m, m) {
            return Err(Error::Dimension(format!(
                "residual covariance must be {m}x{m}"
            )));
        }
    }
    let (w, n_pos) = normalize_weights(weights, n)?;
    let sqrt_w = w.map(|v| v.sqrt());

    // projected regressors (identity when exogenous)
    let xhat: Vec<DMatrix<T>> = match instruments {
        None => equations.iter().map(|e| e.design.matrix.clone()).collect(),
        Some(inst) => {
            if inst.nrows() != n {
                return Err(Error::Dimension(
                    "instrument matrix row count differs".into(),
                ));
            }
            equations
                .iter()
                .map(|e| {
                    let (pi, _) = wls_solve(&inst.matrix, &e.design.matrix, &sqrt_w, &inst.names)?;
                    Ok(&inst.matrix * pi)
                })
                .collect::<Result<_>>()?
        }
    };
    let ks: Vec<usize> = equations.iter().map(|e| e.design.ncols()).collect();
    let mut offsets = Vec::with_capacity(m);
    let mut total = 0;
    for &k in &ks {
        offsets.push(total);
        total += k;
    }
    if ks.iter().any(|&k| n_pos <= k) {
        return Err(Error::InvalidInput(
            "fewer observations than coefficients in an equation".into(),
        ));
    }

    // stage one: equation by equation
    let mut beta = DVector::<T>::zeros(total);
    for (l, eq) in equations.iter().enumerate() {
        let rhs = DMatrix::from_column_slice(n, 1, eq.y.as_slice());
        let (b, _) = wls_solve(&xhat[l], &rhs, &sqrt_w, &eq.design.names)?;
        beta.rows_mut(offsets[l], ks[l]).copy_from(&b.column(0));
    }
    let residuals_of = |beta: &DVector<T>| -> Vec<DVector<T>> {
        equations
            .iter()
            .enumerate()
            .map(|(l, eq)| &eq.y - &eq.design.matrix * beta.rows(offsets[l], ks[l]))
            .collect()
    };
    let estimate_sigma = |res: &[DVector<T>]| -> DMatrix<T> {
        DMatrix::from_fn(m, m, |a, b| {
            let s = (0..n).fold(T::zero(), |acc, i| acc + w[i] * res[a][i] * res[b][i]);
            let da = T::from_usize_lossy(n_pos - ks[a]);
            let db = T::from_usize_lossy(n_pos - ks[b]);
            s / (da * db).sqrt()
        })
    };

    let mut residuals = residuals_of(&beta);
    let mut sigma = match residual_cov {
        Some(s) => s.clone(),
        None => estimate_sigma(&residuals),
    };
    let mut iterations = 0;
    let mut a_inv;
    let mut sigma_inv;
    loop {
        iterations += 1;
        sigma_inv = invert_spd(&sigma).ok_or(Error::SingularResidualCovariance)?;
        // GLS step as least squares on the whitened stack: with
        // sigma^{-1} = L L', row r of observation i is sum_q L[q, r] (y_qi - x̂_qi b_q).
        let l = sigma_inv
            .clone()
            .cholesky()
            .ok_or(Error::SingularResidualCovariance)?
            .l();
        let mut xs = DMatrix::<T>::zeros(n * m, total);
        let mut ys = DMatrix::<T>::zeros(n * m, 1);
        for i in 0..n {
            for r in 0..m {
                let row = i * m + r;
                for q in r..m {
                    let c = l[(q, r)];
                    ys[(row, 0)] += c * equations[q].y[i];
                    for j in 0..ks[q] {
                        xs[(row, offsets[q] + j)] = c * xhat[q][(i, j)];
                    }
                }
            }
        }
        let stacked_w = DVector::from_fn(n * m, |row, _| sqrt_w[row / m]);
        let names: Vec<String> = equations
            .iter()
            .flat_map(|e| {
                e.design
                    .names
                    .iter()
                    .map(move |c| format!("{}:{c}", e.name))
            })
            .collect();
        let (b, inv) = wls_solve(&xs, &ys, &stacked_w, &names)?;
        a_inv = inv;
        symmetrize(&mut a_inv);
        let new_beta = b.column(0).into_owned();
        let change = (&new_beta - &beta).amax() / beta.amax().max(T::one());
        beta = new_beta;
        residuals = residuals_of(&beta);
        let done = !opts.iterate
            || residual_cov.is_some()
            || change <= T::lit(opts.tolerance)
            || iterations >= opts.max_iterations;
        if done {
            break;
        }
        sigma = estimate_sigma(&residuals);
    }

    // per-observation stacked scores s_i
    let mut scores = DMatrix::<T>::zeros(n, total);
    for i in 0..n {
        if w[i] == T::zero() {
            continue;
        }
        for p in 0..m {
            let mut u = T::zero();
            for q in 0..m {
                u += sigma_inv[(p, q)] * residuals[q][i];
            }
            for j in 0..ks[p] {
                scores[(i, offsets[p] + j)] = w[i] * xhat[p][(i, j)] * u;
            }
        }
    }
    let kmax = *ks.iter().max().expect("nonempty");
    let hc_scale = T::from_usize_lossy(n_pos) / T::from_usize_lossy(n_pos - kmax);
    let mut covariance = match opts.covariance {
        CovarianceKind::Classical => a_inv.clone(),
        CovarianceKind::Robust => sandwich(&a_inv, &scores, hc_scale),
    };
    symmetrize(&mut covariance);

    Ok(SystemEstimate {
        equation_names: equations.iter().map(|e| e.name.clone()).collect(),
        names: equations.iter().map(|e| e.design.names.clone()).collect(),
        offsets,
        coefficients: beta,
        covariance,
        residual_cov: sigma,
        residuals,
        nobs: n,
        iterations,
        covariance_kind: opts.covariance,
        scores,
        bread: a_inv,
        hc_scale,
    })
}

fn sandwich<T: Scalar>(bread: &DMatrix<T>, scores: &DMatrix<T>, scale: T) -> DMatrix<T> {
    let meat = scores.transpose() * scores;
    bread * meat * bread * scale
}

impl<T: Scalar> SystemEstimate<T> {
    /// Robust covariance after replacing each observation's score by its
    /// residual from a least-squares projection on `aux`. `aux` has one row
    /// per subject of a larger sample in which observation `k` of the system
    /// is subject `rows[k]`; the other subjects have zero score. With `aux`
    /// the scores of an estimated weight model this accounts for the weights
    /// having been estimated.
    pub fn projected_covariance(&self, rows: &[usize], aux: &DMatrix<T>) -> Result<DMatrix<T>> {
        if rows.len() != self.scores.nrows() || rows.iter().any(|&i| i >= aux.nrows()) {
            return Err(Error::Dimension(format!(
                "{} row indices for {} observations and {} auxiliary rows",
                rows.len(),
                self.scores.nrows(),
                aux.nrows()
            )));
        }
        let mut full = DMatrix::<T>::zeros(aux.nrows(), self.scores.ncols());
        for (k, &i) in rows.iter().enumerate() {
            full.row_mut(i).copy_from(&self.scores.row(k));
        }
        let resid = if aux.ncols() == 0 {
            full
        } else {
            let names: Vec<String> = (0..aux.ncols()).map(|j| format!("aux{j}")).collect();
            let ones = DVector::from_element(aux.nrows(), T::one());
            let (coef, _) = wls_solve(aux, &full, &ones, &names)?;
            &full - aux * coef
        };
        let mut cov = sandwich(&self.bread, &resid, self.hc_scale);
        symmetrize(&mut cov);
        Ok(cov)
    }
}

fn invert_spd<T: Scalar>(m: &DMatrix<T>) -> Option<DMatrix<T>> {
    let chol = m.clone().cholesky()?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    if inv.iter().all(|v| v.is_finite()) {
        Some(inv)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linreg::ols;
    use approx::assert_relative_eq;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    }

    fn data(n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut s = 42u64;
        let x1: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let x2: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let e: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let y1 = (0..n)
            .map(|i| 1.0 + 2.0 * x1[i] + e[i] + 0.3 * lcg(&mut s))
            .collect();
        let y2 = (0..n)
            .map(|i| -1.0 + 0.5 * x1[i] - x2[i] + 0.8 * e[i] + 0.3 * lcg(&mut s))
            .collect();
        (x1, x2, y1, y2)
    }

    fn design(cols: &[(&str, &[f64])]) -> Design<f64> {
        Design::from_columns(
            cols.iter()
                .map(|(n, v)| (n.to_string(), v.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_regressors_reduce_to_equationwise_ols() {
        let n = 60;
        let (x1, x2, y1, y2) = data(n);
        let one = vec![1.0; n];
        let d = design(&[("intercept", &one), ("x1", &x1), ("x2", &x2)]);
        let eqs = vec![
            Equation::new("y1", d.clone(), DVector::from_vec(y1.clone())),
            Equation::new("y2", d.clone(), DVector::from_vec(y2.clone())),
        ];
        let sys = fgls_system(&eqs, None, None, SystemOptions::default()).unwrap();
        for (l, y) in [y1, y2].into_iter().enumerate() {
            let o = ols(&d, &DVector::from_vec(y), None, CovarianceKind::Classical).unwrap();
            let b = sys.block(l);
            for j in 0..3 {
                assert_relative_eq!(b[j], o.coefficients[j], max_relative = 1e-8);
            }
        }
        assert!(sys.residual_cov[(0, 1)] > 0.0);
    }

    #[test]
    fn nested_regressors_leave_smaller_equation_at_ols() {
        let n = 80;
        let (x1, x2, y1, y2) = data(n);
        let one = vec![1.0; n];
        let small = design(&[("intercept", &one), ("x1", &x1)]);
        let big = design(&[("intercept", &one), ("x1", &x1), ("x2", &x2)]);
        let eqs = vec![
            Equation::new("y1", small.clone(), DVector::from_vec(y1.clone())),
            Equation::new("y2", big, DVector::from_vec(y2)),
        ];
        let sys = fgls_system(&eqs, None, None, SystemOptions::default()).unwrap();
        let o = ols(
            &small,
            &DVector::from_vec(y1),
            None,
            CovarianceKind::Classical,
        )
        .unwrap();
        assert_relative_eq!(sys.block(0), o.coefficients, max_relative = 1e-8);
    }

    #[test]
    fn single_equation_matches_ols() {
        let n = 40;
        let (x1, _, y1, _) = data(n);
        let d = design(&[("intercept", &vec![1.0; n]), ("x1", &x1)]);
        let y = DVector::from_vec(y1);
        for kind in [CovarianceKind::Classical, CovarianceKind::Robust] {
            let opts = SystemOptions {
                covariance: kind,
                ..Default::default()
            };
            let sys = fgls_system(
                &[Equation::new("y", d.clone(), y.clone())],
                None,
                None,
                opts,
            )
            .unwrap();
            let o = ols(&d, &y, None, kind).unwrap();
            assert_relative_eq!(sys.coefficients, o.coefficients, max_relative = 1e-10);
            assert_relative_eq!(sys.covariance, o.covariance, max_relative = 1e-10);
        }
    }

    #[test]
    fn diagonal_supplied_covariance_reproduces_ols() {
        let n = 50;
        let (x1, x2, y1, y2) = data(n);
        let one = vec![1.0; n];
        let d1 = design(&[("intercept", &one), ("x1", &x1)]);
        let d2 = design(&[("intercept", &one), ("x2", &x2)]);
        let eqs = vec![
            Equation::new("a", d1.clone(), DVector::from_vec(y1.clone())),
            Equation::new("b", d2.clone(), DVector::from_vec(y2.clone())),
        ];
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        let sys = fgls_system(&eqs, Some(&sigma), None, SystemOptions::default()).unwrap();
        let o1 = ols(&d1, &DVector::from_vec(y1), None, CovarianceKind::Classical).unwrap();
        let o2 = ols(&d2, &DVector::from_vec(y2), None, CovarianceKind::Classical).unwrap();
        assert_relative_eq!(sys.block(0), o1.coefficients, max_relative = 1e-10);
        assert_relative_eq!(sys.block(1), o2.coefficients, max_relative = 1e-10);
    }

    #[test]
    fn singular_residual_covariance_reported() {
        let n = 30;
        let (x1, _, y1, _) = data(n);
        let d = design(&[("intercept", &vec![1.0; n]), ("x1", &x1)]);
        let y = DVector::from_vec(y1);
        let eqs = vec![
            Equation::new("a", d.clone(), y.clone()),
            Equation::new("b", d, y),
        ];
        assert!(matches!(
            fgls_system(&eqs, None, None, SystemOptions::default()),
            Err(Error::SingularResidualCovariance)
        ));
    }

    #[test]
    fn iterated_fgls_converges() {
        let n = 80;
        let (x1, x2, y1, y2) = data(n);
        let one = vec![1.0; n];
        let eqs = vec![
            Equation::new(
                "a",
                design(&[("intercept", &one), ("x1", &x1)]),
                DVector::from_vec(y1),
            ),
            Equation::new(
                "b",
                design(&[("intercept", &one), ("x2", &x2)]),
                DVector::from_vec(y2),
            ),
        ];
        let opts = SystemOptions {
            iterate: true,
            ..Default::default()
        };
        let sys = fgls_system(&eqs, None, None, opts).unwrap();
        assert!(sys.iterations > 1 && sys.iterations < opts.max_iterations);
    }
}
