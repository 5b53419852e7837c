//! Compliance-adjusted estimators.
//!
//! Randomised assignment `z` instruments treatment receipt `d`. The Wald
//! ratio and 2SLS target the CACE of one endpoint; 3SLS targets both
//! endpoints jointly and keeps their cross-covariance, which the INB variance
//! needs. ITT and per-protocol SUR fits are the naive comparators. 2SPS and
//! 2SRI handle binary outcomes with a logistic second stage; note that under
//! unmeasured confounding 2SRI estimates an odds ratio conditional on the
//! confounder, which by non-collapsibility differs from the population odds
//! ratio.

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::data::{Outcome, TrialDataset};
use crate::error::{Error, Result};
use crate::linreg::{
    self, instrumented_system, logistic, ols, CovarianceKind, Design, Equation, FitResult,
    LogisticOptions, SystemEstimate, SystemOptions,
};
use crate::scalar::Scalar;

pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EstimandLabel {
    Cace,
    Itt,
    Pp,
    Ate,
}

impl std::fmt::Display for EstimandLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimandLabel::Cace => "CACE",
            EstimandLabel::Itt => "ITT",
            EstimandLabel::Pp => "PP",
            EstimandLabel::Ate => "ATE",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IvOptions {
    pub covariance: CovarianceKind,
    /// Iterate the FGLS step of 3SLS / SUR.
    pub iterate: bool,
    /// First-stage F below this triggers the weak-instrument flag.
    pub weak_threshold: f64,
}

impl Default for IvOptions {
    fn default() -> Self {
        Self {
            covariance: CovarianceKind::Robust,
            iterate: false,
            weak_threshold: 10.0,
        }
    }
}

impl IvOptions {
    fn system(&self) -> SystemOptions {
        SystemOptions {
            covariance: self.covariance,
            iterate: self.iterate,
            ..Default::default()
        }
    }
}

/// Regression of `d` on `z` (and covariates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstStage<T> {
    pub alpha0: T,
    pub alpha1: T,
    /// Classical standard error of `alpha1`.
    pub alpha1_se: T,
    /// Partial F statistic for excluding `z`.
    pub f_statistic: T,
    pub weak: bool,
}

#[derive(Debug, Clone)]
pub struct IvFit<T: Scalar> {
    pub fit: FitResult<T>,
    pub first_stage: FirstStage<T>,
}

/// Joint estimate of the effects on cost (`theta1`) and QALYs (`theta2`).
#[derive(Debug, Clone)]
pub struct CaceEstimate<T: Scalar> {
    pub theta1: T,
    pub theta2: T,
    pub covariance: Matrix2<T>,
    pub first_stage: Option<FirstStage<T>>,
    pub label: EstimandLabel,
    pub nobs: usize,
    pub system: SystemEstimate<T>,
    /// Dataset rows entering the estimation, in system order.
    pub rows: Vec<usize>,
    /// Positions of the two effects in the system coefficient vector.
    pub effect_index: [usize; 2],
}

impl<T: Scalar> CaceEstimate<T> {
    pub fn se1(&self) -> T {
        self.covariance[(0, 0)].sqrt()
    }

    pub fn se2(&self) -> T {
        self.covariance[(1, 1)].sqrt()
    }

    pub fn correlation(&self) -> T {
        self.covariance[(0, 1)] / (self.se1() * self.se2())
    }

    pub fn theta(&self) -> [T; 2] {
        [self.theta1, self.theta2]
    }

    /// Build from a two-equation system estimate and the regressor carrying the effect.
    pub fn from_system(
        system: SystemEstimate<T>,
        effect: &str,
        label: EstimandLabel,
        first_stage: Option<FirstStage<T>>,
    ) -> Result<Self> {
        let i1 = system
            .index_of(0, effect)
            .ok_or_else(|| Error::InvalidInput(format!("no '{effect}' in cost equation")))?;
        let i2 = system
            .index_of(1, effect)
            .ok_or_else(|| Error::InvalidInput(format!("no '{effect}' in QALY equation")))?;
        let c = &system.covariance;
        let covariance = Matrix2::new(c[(i1, i1)], c[(i1, i2)], c[(i2, i1)], c[(i2, i2)]);
        Ok(Self {
            theta1: system.coefficients[i1],
            theta2: system.coefficients[i2],
            covariance,
            first_stage,
            label,
            nobs: system.nobs,
            system,
            rows: vec![],
            effect_index: [i1, i2],
        })
    }

    /// Replace the system covariance and refresh the effect block.
    pub fn set_system_covariance(&mut self, cov: DMatrix<T>) {
        let [i1, i2] = self.effect_index;
        self.covariance = Matrix2::new(cov[(i1, i1)], cov[(i1, i2)], cov[(i2, i1)], cov[(i2, i2)]);
        self.system.covariance = cov;
    }

    fn with_rows(mut self, rows: Vec<usize>) -> Self {
        self.rows = rows;
        self
    }
}

/// `{E(Y|Z=1) - E(Y|Z=0)} / {E(D|Z=1) - E(D|Z=0)}` from sample means.
pub fn wald_cace<T: Scalar>(z: &[bool], d: &[bool], y: &[T]) -> Result<T> {
    if z.len() != d.len() || z.len() != y.len() {
        return Err(Error::Dimension("z, d and y must have equal length".into()));
    }
    let mut n = [0usize; 2];
    let mut sd = [T::zero(); 2];
    let mut sy = [T::zero(); 2];
    for i in 0..z.len() {
        let a = z[i] as usize;
        n[a] += 1;
        if d[i] {
            sd[a] += T::one();
        }
        sy[a] += y[i];
    }
    if n[0] == 0 || n[1] == 0 {
        return Err(Error::EmptySample(
            "both randomised arms must be nonempty".into(),
        ));
    }
    let mean = |s: T, a: usize| s / T::from_usize_lossy(n[a]);
    let denom = mean(sd[1], 1) - mean(sd[0], 0);
    if denom == T::zero() {
        return Err(Error::IrrelevantInstrument { difference: 0.0 });
    }
    Ok((mean(sy[1], 1) - mean(sy[0], 0)) / denom)
}

fn bool_col<T: Scalar>(v: &[bool], rows: &[usize]) -> Vec<T> {
    rows.iter()
        .map(|&i| if v[i] { T::one() } else { T::zero() })
        .collect()
}

/// Design with an intercept followed by the named columns over `rows`.
pub(crate) fn build_design<T: Scalar>(
    ds: &TrialDataset<T>,
    rows: &[usize],
    columns: &[&str],
) -> Result<Design<T>> {
    let mut cols = vec![(INTERCEPT.to_string(), vec![T::one(); rows.len()])];
    for &name in columns {
        let c = ds.column(name)?;
        let vals = rows
            .iter()
            .map(|&i| {
                c[i].ok_or_else(|| Error::InvalidInput(format!("'{name}' missing in row {i}")))
            })
            .collect::<Result<Vec<T>>>()?;
        cols.push((name.to_string(), vals));
    }
    Design::from_columns(cols)
}

fn outcome_vec<T: Scalar>(ds: &TrialDataset<T>, outcome: Outcome, rows: &[usize]) -> DVector<T> {
    let y = ds.outcome(outcome);
    DVector::from_iterator(
        rows.len(),
        rows.iter().map(|&i| y[i].expect("complete row")),
    )
}

/// Complete rows for `needed`, restricted to positive weights when given.
fn analysis_rows<T: Scalar>(
    ds: &TrialDataset<T>,
    needed: &[&str],
    weights: Option<&[T]>,
) -> Result<Vec<usize>> {
    if let Some(w) = weights {
        if w.len() != ds.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} subjects",
                w.len(),
                ds.len()
            )));
        }
    }
    let rows: Vec<usize> = ds
        .complete_rows(needed)?
        .into_iter()
        .filter(|&i| weights.is_none_or(|w| w[i] > T::zero()))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptySample(format!(
            "no complete cases for {needed:?}"
        )));
    }
    Ok(rows)
}

fn sub_weights<T: Scalar>(weights: Option<&[T]>, rows: &[usize]) -> Option<DVector<T>> {
    weights.map(|w| DVector::from_iterator(rows.len(), rows.iter().map(|&i| w[i])))
}

pub(crate) fn check_relevance<T: Scalar>(ds: &TrialDataset<T>, rows: &[usize]) -> Result<()> {
    let mut n = [0usize; 2];
    let mut s = [0usize; 2];
    for &i in rows {
        let a = ds.z()[i] as usize;
        n[a] += 1;
        s[a] += ds.d()[i] as usize;
    }
    if n[0] == 0 || n[1] == 0 {
        return Err(Error::IrrelevantInstrument { difference: 0.0 });
    }
    let diff = s[1] as f64 / n[1] as f64 - s[0] as f64 / n[0] as f64;
    if diff == 0.0 {
        return Err(Error::IrrelevantInstrument { difference: diff });
    }
    Ok(())
}

fn first_stage<T: Scalar>(
    ds: &TrialDataset<T>,
    rows: &[usize],
    covariates: &[&str],
    w: Option<&DVector<T>>,
    weak_threshold: f64,
) -> Result<(FirstStage<T>, FitResult<T>)> {
    let mut cols = vec!["z"];
    cols.extend_from_slice(covariates);
    let inst = build_design(ds, rows, &cols)?;
    let dv = DVector::from_vec(bool_col::<T>(ds.d(), rows));
    let full = ols(&inst, &dv, w, CovarianceKind::Classical)?;
    let restricted = build_design(ds, rows, covariates)?;
    let red = ols(&restricted, &dv, w, CovarianceKind::Classical)?;
    let (wn, n_pos) = linreg::normalize_weights(w, rows.len())?;
    let rss = |r: &DVector<T>| {
        r.iter()
            .zip(wn.iter())
            .fold(T::zero(), |a, (&e, &wi)| a + wi * e * e)
    };
    let rss_u = rss(&full.residuals);
    let rss_r = rss(&red.residuals);
    let dof = T::from_usize_lossy(n_pos - inst.ncols());
    let f_statistic = (rss_r - rss_u) / (rss_u / dof);
    let j = full.index_of("z").expect("z in first stage");
    let weak = f_statistic.as_f64() < weak_threshold;
    if weak {
        log::warn!(
            "weak instrument: first-stage F = {:.3}",
            f_statistic.as_f64()
        );
    }
    Ok((
        FirstStage {
            alpha0: full.coefficients[0],
            alpha1: full.coefficients[j],
            alpha1_se: full.std_error(j),
            f_statistic,
            weak,
        },
        full,
    ))
}

fn instruments<T: Scalar>(
    ds: &TrialDataset<T>,
    rows: &[usize],
    covariates: &[&str],
) -> Result<Design<T>> {
    let mut cols = vec!["z"];
    cols.extend_from_slice(covariates);
    build_design(ds, rows, &cols)
}

fn regressors<T: Scalar>(
    ds: &TrialDataset<T>,
    rows: &[usize],
    treatment: &str,
    covariates: &[&str],
) -> Result<Design<T>> {
    let mut cols = vec![treatment];
    cols.extend_from_slice(covariates);
    build_design(ds, rows, &cols)
}

fn with_outcomes<'a>(covariates: &[&'a str], outcomes: &[&'a str]) -> Vec<&'a str> {
    let mut v = outcomes.to_vec();
    v.extend_from_slice(covariates);
    v
}

/// Two-stage least squares for one outcome.
///
/// Coefficients are ordered `[intercept, d, covariates...]`; the covariance
/// is the IV covariance built from structural residuals (sandwich when
/// `opts.covariance` is robust).
pub fn tsls<T: Scalar>(
    ds: &TrialDataset<T>,
    outcome: Outcome,
    covariates: &[&str],
    weights: Option<&[T]>,
    opts: IvOptions,
) -> Result<IvFit<T>> {
    let yname = outcome.variable().name();
    let rows = analysis_rows(ds, &with_outcomes(covariates, &[yname]), weights)?;
    check_relevance(ds, &rows)?;
    let w = sub_weights(weights, &rows);
    let (fs, _) = first_stage(ds, &rows, covariates, w.as_ref(), opts.weak_threshold)?;
    let x = regressors(ds, &rows, "d", covariates)?;
    let inst = instruments(ds, &rows, covariates)?;
    let y = outcome_vec(ds, outcome, &rows);
    let sys = instrumented_system(
        &[Equation::new(yname, x.clone(), y.clone())],
        &inst,
        None,
        w.as_ref(),
        opts.system(),
    )?;
    let fitted = &x.matrix * &sys.coefficients;
    Ok(IvFit {
        fit: FitResult {
            names: x.names,
            residuals: y - &fitted,
            fitted,
            coefficients: sys.coefficients,
            covariance: sys.covariance,
            nobs: rows.len(),
            covariance_kind: opts.covariance,
        },
        first_stage: fs,
    })
}

/// Three-stage least squares for (cost, QALY) on their common complete cases.
pub fn three_sls<T: Scalar>(
    ds: &TrialDataset<T>,
    covariates: &[&str],
    weights: Option<&[T]>,
    opts: IvOptions,
) -> Result<CaceEstimate<T>> {
    iv_system(ds, covariates, weights, opts, false)
}

/// Equation-by-equation 2SLS for both endpoints with their joint sandwich
/// covariance (no cross-equation reweighting).
pub fn tsls_pair<T: Scalar>(
    ds: &TrialDataset<T>,
    covariates: &[&str],
    weights: Option<&[T]>,
    opts: IvOptions,
) -> Result<CaceEstimate<T>> {
    iv_system(ds, covariates, weights, opts, true)
}

fn iv_system<T: Scalar>(
    ds: &TrialDataset<T>,
    covariates: &[&str],
    weights: Option<&[T]>,
    opts: IvOptions,
    equationwise: bool,
) -> Result<CaceEstimate<T>> {
    let rows = analysis_rows(ds, &with_outcomes(covariates, &["y1", "y2"]), weights)?;
    check_relevance(ds, &rows)?;
    let w = sub_weights(weights, &rows);
    let (fs, _) = first_stage(ds, &rows, covariates, w.as_ref(), opts.weak_threshold)?;
    let x = regressors(ds, &rows, "d", covariates)?;
    let inst = instruments(ds, &rows, covariates)?;
    let eqs = [
        Equation::new("y1", x.clone(), outcome_vec(ds, Outcome::Cost, &rows)),
        Equation::new("y2", x, outcome_vec(ds, Outcome::Qaly, &rows)),
    ];
    let identity = DMatrix::<T>::identity(2, 2);
    let fixed = (equationwise && opts.covariance == CovarianceKind::Robust).then_some(&identity);
    let sys = instrumented_system(&eqs, &inst, fixed, w.as_ref(), opts.system())?;
    Ok(CaceEstimate::from_system(sys, "d", EstimandLabel::Cace, Some(fs))?.with_rows(rows))
}

fn sur<T: Scalar>(
    ds: &TrialDataset<T>,
    rows: &[usize],
    treatment: &str,
    covariates: &[&str],
    weights: Option<&[T]>,
    opts: IvOptions,
    label: EstimandLabel,
) -> Result<CaceEstimate<T>> {
    let w = sub_weights(weights, rows);
    let x = regressors(ds, rows, treatment, covariates)?;
    let eqs = [
        Equation::new("y1", x.clone(), outcome_vec(ds, Outcome::Cost, rows)),
        Equation::new("y2", x, outcome_vec(ds, Outcome::Qaly, rows)),
    ];
    let sys = linreg::fgls_system(&eqs, None, w.as_ref(), opts.system())?;
    Ok(CaceEstimate::from_system(sys, treatment, label, None)?.with_rows(rows.to_vec()))
}

/// Intention-to-treat SUR: both outcomes regressed on assignment.
pub fn itt_sur<T: Scalar>(
    ds: &TrialDataset<T>,
    covariates: &[&str],
    weights: Option<&[T]>,
    opts: IvOptions,
) -> Result<CaceEstimate<T>> {
    let rows = analysis_rows(ds, &with_outcomes(covariates, &["y1", "y2"]), weights)?;
    sur(
        ds,
        &rows,
        "z",
        covariates,
        weights,
        opts,
        EstimandLabel::Itt,
    )
}

/// Per-protocol SUR: subjects with `d != z` are excluded.
pub fn pp_sur<T: Scalar>(
    ds: &TrialDataset<T>,
    covariates: &[&str],
    weights: Option<&[T]>,
    opts: IvOptions,
) -> Result<CaceEstimate<T>> {
    let rows: Vec<usize> = analysis_rows(ds, &with_outcomes(covariates, &["y1", "y2"]), weights)?
        .into_iter()
        .filter(|&i| ds.d()[i] == ds.z()[i])
        .collect();
    let arms = rows.iter().fold([0usize; 2], |mut a, &i| {
        a[ds.z()[i] as usize] += 1;
        a
    });
    if arms[0] == 0 || arms[1] == 0 {
        return Err(Error::EmptySample(
            "per-protocol sample lacks adherent subjects in an arm".into(),
        ));
    }
    sur(ds, &rows, "d", covariates, weights, opts, EstimandLabel::Pp)
}

fn binary_outcome<T: Scalar>(
    ds: &TrialDataset<T>,
    name: &str,
    rows: &[usize],
) -> Result<Vec<bool>> {
    let col = ds.column(name)?;
    rows.iter()
        .map(|&i| match col[i] {
            Some(v) if v == T::zero() => Ok(false),
            Some(v) if v == T::one() => Ok(true),
            other => Err(Error::Validation {
                row: i + 1,
                message: format!("binary outcome '{name}' must be 0 or 1, found {other:?}"),
            }),
        })
        .collect()
}

fn two_stage_binary<T: Scalar>(
    ds: &TrialDataset<T>,
    outcome: &str,
    covariates: &[&str],
    residual_inclusion: bool,
    opts: IvOptions,
) -> Result<IvFit<T>> {
    let rows = analysis_rows(ds, &with_outcomes(covariates, &[outcome]), None)?;
    check_relevance(ds, &rows)?;
    let y = binary_outcome(ds, outcome, &rows)?;
    let (fs, first) = first_stage(ds, &rows, covariates, None, opts.weak_threshold)?;
    let mut cols: Vec<(String, Vec<T>)> = vec![(INTERCEPT.into(), vec![T::one(); rows.len()])];
    if residual_inclusion {
        cols.push(("d".into(), bool_col(ds.d(), &rows)));
    } else {
        cols.push(("d_hat".into(), first.fitted.iter().copied().collect()));
    }
    for &c in covariates {
        let col = ds.column(c)?;
        cols.push((
            c.into(),
            rows.iter().map(|&i| col[i].expect("complete")).collect(),
        ));
    }
    if residual_inclusion {
        cols.push((
            "first_stage_residual".into(),
            first.residuals.iter().copied().collect(),
        ));
    }
    let design = Design::from_columns(cols)?;
    let fit = logistic(&design, &y, LogisticOptions::default())?;
    Ok(IvFit {
        fit,
        first_stage: fs,
    })
}

/// Two-stage predictor substitution: logistic regression of a binary outcome
/// on the first-stage fitted `d_hat` (+ covariates). Standard errors are the
/// naive second-stage ones.
pub fn tsps<T: Scalar>(
    ds: &TrialDataset<T>,
    outcome: &str,
    covariates: &[&str],
    opts: IvOptions,
) -> Result<IvFit<T>> {
    two_stage_binary(ds, outcome, covariates, false, opts)
}

/// Two-stage residual inclusion: logistic regression on `d`, covariates and
/// the first-stage residual. Consistent for the conditional log odds ratio
/// only when no confounder of receipt and outcome is left unmeasured.
pub fn tsri<T: Scalar>(
    ds: &TrialDataset<T>,
    outcome: &str,
    covariates: &[&str],
    opts: IvOptions,
) -> Result<IvFit<T>> {
    two_stage_binary(ds, outcome, covariates, true, opts)
}

/// Inverse probability weighting for non-compliance.
///
/// Subjects who depart from their allocation are censored; adherent
/// subjects are weighted by the inverse of their fitted probability of
/// adhering (logistic model on `adherence_covariates`, fitted per arm). The
/// weighted SUR of both outcomes on `d` targets the average treatment effect
/// under no unmeasured confounding of adherence.
pub fn ipw_compliance<T: Scalar>(
    ds: &TrialDataset<T>,
    adherence_covariates: &[&str],
    covariates: &[&str],
    opts: IvOptions,
) -> Result<CaceEstimate<T>> {
    let mut needed = with_outcomes(covariates, &["y1", "y2"]);
    needed.extend_from_slice(adherence_covariates);
    let rows = analysis_rows(ds, &needed, None)?;
    let mut weights = vec![T::zero(); ds.len()];
    for arm in [false, true] {
        let arm_rows: Vec<usize> = rows.iter().copied().filter(|&i| ds.z()[i] == arm).collect();
        if arm_rows.is_empty() {
            return Err(Error::EmptySample(format!("arm z={} is empty", arm as u8)));
        }
        let adherent: Vec<bool> = arm_rows.iter().map(|&i| ds.d()[i] == arm).collect();
        let n_adh = adherent.iter().filter(|&&a| a).count();
        if n_adh == 0 {
            return Err(Error::EmptySample(format!(
                "nobody adheres in arm z={}",
                arm as u8
            )));
        }
        let probs: Vec<T> = if n_adh == arm_rows.len() {
            vec![T::one(); arm_rows.len()]
        } else {
            let design = build_design(ds, &arm_rows, adherence_covariates)?;
            let fit = logistic(&design, &adherent, LogisticOptions::default()).map_err(|e| match e {
                Error::Separation(m) => Error::Separation(format!(
                    "{m}; covariates perfectly predict non-adherence (probability of non-adherence equal to one)"
                )),
                other => other,
            })?;
            fit.fitted.iter().copied().collect()
        };
        for (k, &i) in arm_rows.iter().enumerate() {
            if adherent[k] {
                weights[i] = T::one() / probs[k];
            }
        }
    }
    let kept: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|&i| weights[i] > T::zero())
        .collect();
    let robust = IvOptions {
        covariance: CovarianceKind::Robust,
        ..opts
    };
    sur(
        ds,
        &kept,
        "d",
        covariates,
        Some(&weights),
        robust,
        EstimandLabel::Ate,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use indexmap::IndexMap;

    fn ds_from(z: &[u8], d: &[u8], y1: &[f64], y2: &[f64], x: &[f64]) -> TrialDataset<f64> {
        let mut cov = IndexMap::new();
        cov.insert("x".to_string(), x.iter().map(|&v| Some(v)).collect());
        TrialDataset::new(
            z.iter().map(|&v| v == 1).collect(),
            d.iter().map(|&v| v == 1).collect(),
            y1.iter().map(|&v| Some(v)).collect(),
            y2.iter().map(|&v| Some(v)).collect(),
            x.iter().map(|&v| Some(v * 0.1)).collect(),
            cov,
        )
        .unwrap()
    }

    #[test]
    fn wald_four_rows() {
        // (6 - 3) / (0.5 - 0)
        let z = [true, true, false, false];
        let d = [true, false, false, false];
        let y = [10.0, 2.0, 2.0, 4.0];
        assert_relative_eq!(wald_cace(&z, &d, &y).unwrap(), 6.0);
    }

    #[test]
    fn wald_perfect_compliance_is_itt() {
        let z = [true, true, false, false, true];
        let y = [3.0, 5.0, 1.0, 2.0, 4.0];
        assert_relative_eq!(wald_cace(&z, &z, &y).unwrap(), 4.0 - 1.5);
    }

    #[test]
    fn wald_irrelevant_instrument() {
        let z = [true, true, false, false];
        let d = [true, false, true, false];
        assert!(matches!(
            wald_cace(&z, &d, &[1.0, 2.0, 3.0, 4.0]),
            Err(Error::IrrelevantInstrument { .. })
        ));
    }

    fn example() -> TrialDataset<f64> {
        let z = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 1, 0];
        let d = [1, 1, 0, 1, 1, 0, 0, 1, 0, 0, 1, 0];
        let y1 = [
            12.0, 15.0, 7.0, 14.0, 13.5, 8.0, 6.5, 12.0, 7.5, 9.0, 16.0, 7.0,
        ];
        let y2 = [1.1, 1.3, 0.8, 1.2, 1.0, 0.9, 0.7, 1.1, 0.6, 0.95, 1.4, 0.8];
        let x = [
            0.3, -1.0, 0.5, 0.2, 1.5, -0.7, 0.1, 0.9, -1.2, 0.4, 0.0, 0.6,
        ];
        ds_from(&z, &d, &y1, &y2, &x)
    }

    #[test]
    fn tsls_without_covariates_equals_wald() {
        let ds = example();
        let fit = tsls(&ds, Outcome::Cost, &[], None, IvOptions::default()).unwrap();
        let y: Vec<f64> = ds.y1().iter().map(|v| v.unwrap()).collect();
        let w = wald_cace(ds.z(), ds.d(), &y).unwrap();
        assert!((fit.fit.coef("d").unwrap() - w).abs() < 1e-10);
    }

    #[test]
    fn first_stage_f_is_squared_t() {
        let ds = example();
        let fit = tsls(&ds, Outcome::Qaly, &["x"], None, IvOptions::default()).unwrap();
        let t = fit.first_stage.alpha1 / fit.first_stage.alpha1_se;
        assert_relative_eq!(fit.first_stage.f_statistic, t * t, max_relative = 1e-8);
    }

    #[test]
    fn three_sls_equals_tsls_pointwise() {
        let ds = example();
        let est = three_sls(&ds, &["x"], None, IvOptions::default()).unwrap();
        let a = tsls(&ds, Outcome::Cost, &["x"], None, IvOptions::default()).unwrap();
        let b = tsls(&ds, Outcome::Qaly, &["x"], None, IvOptions::default()).unwrap();
        assert_relative_eq!(est.theta1, a.fit.coef("d").unwrap(), max_relative = 1e-8);
        assert_relative_eq!(est.theta2, b.fit.coef("d").unwrap(), max_relative = 1e-8);
        // marginal variances agree with the single-equation sandwich
        assert_relative_eq!(
            est.covariance[(0, 0)],
            a.fit.covariance[(1, 1)],
            max_relative = 1e-8
        );
        assert_eq!(est.label, EstimandLabel::Cace);
    }

    #[test]
    fn perfect_compliance_collapses_estimands() {
        let mut ds = example();
        let z = ds.z().to_vec();
        ds = TrialDataset::new(
            z.clone(),
            z,
            ds.y1().to_vec(),
            ds.y2().to_vec(),
            ds.eq5d0().to_vec(),
            ds.covariates().clone(),
        )
        .unwrap();
        let o = IvOptions::default();
        let c = three_sls(&ds, &[], None, o).unwrap();
        let i = itt_sur(&ds, &[], None, o).unwrap();
        let p = pp_sur(&ds, &[], None, o).unwrap();
        for e in [&i, &p] {
            assert_relative_eq!(e.theta1, c.theta1, max_relative = 1e-10);
            assert_relative_eq!(e.theta2, c.theta2, max_relative = 1e-10);
        }
        // saturated first stage: 2SLS equals OLS of y on z
        let t = tsls(&ds, Outcome::Cost, &[], None, o).unwrap();
        assert_relative_eq!(t.fit.coef("d").unwrap(), i.theta1, max_relative = 1e-10);
    }

    #[test]
    fn constant_assignment_rejected() {
        let ds = example();
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.z()[i]).collect();
        let one_arm = ds.subset(&rows);
        assert!(matches!(
            three_sls(&one_arm, &[], None, IvOptions::default()),
            Err(Error::IrrelevantInstrument { .. })
        ));
    }

    #[test]
    fn equal_weights_are_exact_noop() {
        let ds = example();
        let w = vec![1.0; ds.len()];
        let o = IvOptions::default();
        let a = three_sls(&ds, &["x"], None, o).unwrap();
        let b = three_sls(&ds, &["x"], Some(&w), o).unwrap();
        assert_eq!(a.theta1, b.theta1);
        assert_eq!(a.covariance, b.covariance);
        let halves = vec![2.0; ds.len()];
        let c = three_sls(&ds, &["x"], Some(&halves), o).unwrap();
        assert_eq!(a.theta2, c.theta2);
    }

    #[test]
    fn swapping_outcomes_swaps_estimates() {
        let ds = example();
        let swapped = ds
            .with_values(crate::data::Variable::Cost, ds.y2().to_vec())
            .unwrap()
            .with_values(crate::data::Variable::Qaly, ds.y1().to_vec())
            .unwrap();
        let o = IvOptions::default();
        let a = three_sls(&ds, &["x"], None, o).unwrap();
        let b = three_sls(&swapped, &["x"], None, o).unwrap();
        assert_relative_eq!(a.theta1, b.theta2, max_relative = 1e-10);
        assert_relative_eq!(
            a.covariance[(0, 1)],
            b.covariance[(1, 0)],
            max_relative = 1e-8
        );
        assert_relative_eq!(
            a.covariance[(0, 0)],
            b.covariance[(1, 1)],
            max_relative = 1e-8
        );
    }

    #[test]
    fn pp_requires_both_arms() {
        let ds = example();
        let rows: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.z()[i] != ds.d()[i] || ds.z()[i])
            .collect();
        assert!(matches!(
            pp_sur(&ds.subset(&rows), &[], None, IvOptions::default()),
            Err(Error::EmptySample(_))
        ));
    }
}
