//! Estimand × missing-data method combinations.
//!
//! [`run`] takes a (possibly incomplete) trial dataset and produces effect
//! estimates on both endpoints, their joint covariance, 95% intervals and a
//! net-benefit summary. The command-line tool and the Monte Carlo harness
//! both go through here.

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::bayes::{
    fit_bayes_iv, summarize_posterior, BayesIvConfig, ParamDiagnostic, PosteriorDraws,
};
use crate::cea::{CeaResult, Z_975};
use crate::data::{enforce_monotone_with, Cascade, TrialDataset};
use crate::error::{Error, Result};
use crate::iv::{itt_sur, pp_sur, three_sls, tsls_pair, CaceEstimate, EstimandLabel, IvOptions};
use crate::linreg::CovarianceKind;
use crate::missing::rubin::t_quantile_975;
use crate::missing::{
    adjust_for_estimated_weights, donor_property_violations, fit_pom, ipw_weights, mi_impute,
    rubin_pool, ImputationSet, MiConfig, PomSpec, WeightOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "itt")]
    Itt,
    #[serde(rename = "pp")]
    Pp,
    #[serde(rename = "cace-3sls")]
    Cace3sls,
    #[serde(rename = "cace-2sls")]
    Cace2sls,
    #[serde(rename = "bayes")]
    Bayes,
}

impl Estimand {
    pub const ALL: [Estimand; 5] = [
        Estimand::Itt,
        Estimand::Pp,
        Estimand::Cace3sls,
        Estimand::Cace2sls,
        Estimand::Bayes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimand::Itt => "itt",
            Estimand::Pp => "pp",
            Estimand::Cace3sls => "cace-3sls",
            Estimand::Cace2sls => "cace-2sls",
            Estimand::Bayes => "bayes",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown estimand '{s}' (itt, pp, cace-3sls, cace-2sls, bayes)"
                ))
            })
    }

    pub fn label(self) -> EstimandLabel {
        match self {
            Estimand::Itt => EstimandLabel::Itt,
            Estimand::Pp => EstimandLabel::Pp,
            _ => EstimandLabel::Cace,
        }
    }
}

impl std::fmt::Display for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingMethod {
    Cca,
    Ipw,
    Mi,
    Bayes,
}

impl MissingMethod {
    pub const ALL: [MissingMethod; 4] = [
        MissingMethod::Cca,
        MissingMethod::Ipw,
        MissingMethod::Mi,
        MissingMethod::Bayes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MissingMethod::Cca => "cca",
            MissingMethod::Ipw => "ipw",
            MissingMethod::Mi => "mi",
            MissingMethod::Bayes => "bayes",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown missing-data method '{s}' (cca, ipw, mi, bayes)"
                ))
            })
    }
}

impl std::fmt::Display for MissingMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Rejects combinations that have no coherent meaning.
pub fn check_combination(estimand: Estimand, missing: MissingMethod) -> Result<()> {
    match (estimand, missing) {
        (Estimand::Bayes, MissingMethod::Ipw | MissingMethod::Mi) => Err(Error::Config(format!(
            "the Bayesian model handles missing data itself; use --missing cca or bayes, not {missing}"
        ))),
        (e, MissingMethod::Bayes) if e != Estimand::Bayes => Err(Error::Config(format!(
            "missing-data method 'bayes' requires the bayes estimand, not {e}"
        ))),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub covariates: Vec<String>,
    pub lambda: f64,
    pub covariance: CovarianceKind,
    pub mi: MiConfig,
    pub bayes: BayesIvConfig,
    /// Monotone dropout order used by IPW.
    pub cascade: Cascade,
    pub pom_threshold: f64,
    pub weights: WeightOptions,
    /// Count donor-property violations of every imputed cell (MI only).
    pub audit_donors: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            covariates: vec![],
            lambda: 20_000.0,
            covariance: CovarianceKind::Robust,
            mi: MiConfig::default(),
            bayes: BayesIvConfig::default(),
            cascade: Cascade::default(),
            pom_threshold: 0.1,
            weights: WeightOptions::default(),
            audit_donors: false,
        }
    }
}

impl PipelineConfig {
    fn iv_options(&self) -> IvOptions {
        IvOptions {
            covariance: self.covariance,
            ..Default::default()
        }
    }

    fn covariate_refs(&self) -> Vec<&str> {
        self.covariates.iter().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub equation: String,
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStageReport {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha1_se: f64,
    pub f_statistic: f64,
    pub weak: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiSummary {
    pub m: usize,
    pub k: usize,
    pub cycles: usize,
    pub seed: u64,
    /// Imputed cells for eq5d0, cost and qaly.
    pub imputed: [usize; 3],
    pub df_method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub donor_violations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpwSummary {
    /// Regressors retained in each stage's observation model.
    pub selected: [Vec<String>; 3],
    pub cascade: Cascade,
    pub dropped_nonmonotone: usize,
    pub max_weight: f64,
    pub mean_weight: f64,
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesSummary {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub draws: usize,
    pub prior_sd: f64,
    pub wishart_df: f64,
    pub wishart_scale: [[f64; 3]; 3],
    pub acceptance: Vec<f64>,
    pub max_rhat: f64,
    pub diagnostics: Vec<ParamDiagnostic>,
}

/// Result of one estimand × missing-data combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub estimand: Estimand,
    pub missing: MissingMethod,
    pub label: EstimandLabel,
    /// Effects on cost and QALYs (posterior medians for the Bayesian model).
    pub theta: [f64; 2],
    pub std_error: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    pub intervals: [[f64; 2]; 2],
    /// Degrees of freedom behind the intervals (MI only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub df: Option<[f64; 2]>,
    pub nobs: usize,
    pub n: usize,
    pub coefficients: Vec<Coefficient>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_stage: Option<FirstStageReport>,
    pub cea: CeaResult<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mi: Option<MiSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ipw: Option<IpwSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bayes: Option<BayesSummary>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub draws: Option<PosteriorDraws>,
}

impl PipelineOutput {
    pub fn max_rhat(&self) -> Option<f64> {
        self.bayes.as_ref().map(|b| b.max_rhat)
    }
}

fn first_stage_report(est: &CaceEstimate<f64>) -> Option<FirstStageReport> {
    est.first_stage.map(|f| FirstStageReport {
        alpha0: f.alpha0,
        alpha1: f.alpha1,
        alpha1_se: f.alpha1_se,
        f_statistic: f.f_statistic,
        weak: f.weak,
    })
}

fn coefficient_table(
    est: &CaceEstimate<f64>,
    values: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Vec<Coefficient> {
    let s = &est.system;
    let mut out = Vec::with_capacity(values.len());
    for (e, names) in s.names.iter().enumerate() {
        for (j, name) in names.iter().enumerate() {
            let g = s.offsets[e] + j;
            out.push(Coefficient {
                equation: s.equation_names[e].clone(),
                name: name.clone(),
                estimate: values[g],
                std_error: cov[(g, g)].max(0.0).sqrt(),
            });
        }
    }
    out
}

fn to_array(m: &Matrix2<f64>) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

/// Frequentist estimator on one dataset.
pub fn estimate_frequentist(
    ds: &TrialDataset<f64>,
    estimand: Estimand,
    covariates: &[&str],
    weights: Option<&[f64]>,
    opts: IvOptions,
) -> Result<CaceEstimate<f64>> {
    match estimand {
        Estimand::Itt => itt_sur(ds, covariates, weights, opts),
        Estimand::Pp => pp_sur(ds, covariates, weights, opts),
        Estimand::Cace3sls => three_sls(ds, covariates, weights, opts),
        Estimand::Cace2sls => tsls_pair(ds, covariates, weights, opts),
        Estimand::Bayes => Err(Error::Config(
            "the bayes estimand is not a frequentist estimator".into(),
        )),
    }
}

fn wald_output(
    est: &CaceEstimate<f64>,
    estimand: Estimand,
    missing: MissingMethod,
    n: usize,
    lambda: f64,
) -> Result<PipelineOutput> {
    let se = [est.se1(), est.se2()];
    let theta = est.theta();
    let intervals = std::array::from_fn(|j| [theta[j] - Z_975 * se[j], theta[j] + Z_975 * se[j]]);
    let cea = CeaResult::from_moments(
        est.theta1,
        est.theta2,
        &est.covariance,
        lambda,
        &est.label.to_string(),
        missing.name(),
    )?;
    Ok(PipelineOutput {
        estimand,
        missing,
        label: est.label,
        theta,
        std_error: se,
        covariance: to_array(&est.covariance),
        intervals,
        df: None,
        nobs: est.nobs,
        n,
        coefficients: coefficient_table(est, &est.system.coefficients, &est.system.covariance),
        first_stage: first_stage_report(est),
        cea,
        mi: None,
        ipw: None,
        bayes: None,
        warnings: vec![],
        draws: None,
    })
}

/// Run one estimand × missing-data combination.
pub fn run(
    ds: &TrialDataset<f64>,
    estimand: Estimand,
    missing: MissingMethod,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    check_combination(estimand, missing)?;
    let covs = cfg.covariate_refs();
    match (estimand, missing) {
        (Estimand::Bayes, m) => run_bayes(ds, m == MissingMethod::Bayes, cfg),
        (e, MissingMethod::Cca) => {
            let est = estimate_frequentist(ds, e, &covs, None, cfg.iv_options())?;
            wald_output(&est, e, MissingMethod::Cca, ds.len(), cfg.lambda)
        }
        (e, MissingMethod::Ipw) => run_ipw(ds, e, cfg),
        (e, MissingMethod::Mi) => {
            let imp = mi_impute(ds, &cfg.mi)?;
            let mut out = estimate_imputed(&imp, e, cfg)?;
            if cfg.audit_donors {
                if let Some(mi) = out.mi.as_mut() {
                    mi.donor_violations = Some(donor_property_violations(ds, &imp));
                }
            }
            Ok(out)
        }
        (_, MissingMethod::Bayes) => unreachable!("rejected by check_combination"),
    }
}

fn run_ipw(
    ds: &TrialDataset<f64>,
    estimand: Estimand,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let mono = enforce_monotone_with(ds, cfg.cascade);
    let mut warnings: Vec<String> = mono.warning.clone().into_iter().collect();
    if mono.dropped > 0 {
        warnings.push(format!(
            "{} subjects with non-monotone missingness excluded before weighting",
            mono.dropped
        ));
    }
    let data = &mono.dataset;
    let mut spec = PomSpec::default_for(data, cfg.cascade);
    spec.threshold = cfg.pom_threshold;
    let models = fit_pom(data, &spec)?;
    let w = ipw_weights(&models, cfg.weights)?;
    let covs = cfg.covariate_refs();
    let mut est = estimate_frequentist(data, estimand, &covs, Some(&w.weights), cfg.iv_options())?;
    if cfg.covariance == CovarianceKind::Robust {
        adjust_for_estimated_weights(&mut est, &models, data)?;
    }
    let mut out = wald_output(&est, estimand, MissingMethod::Ipw, ds.len(), cfg.lambda)?;
    out.ipw = Some(IpwSummary {
        selected: std::array::from_fn(|s| models.models[s].selected.clone()),
        cascade: cfg.cascade,
        dropped_nonmonotone: mono.dropped,
        max_weight: w.max,
        mean_weight: w.mean,
        truncated: w.truncated,
    });
    out.warnings = warnings;
    Ok(out)
}

/// Fit a frequentist estimand on every completed dataset and pool by
/// Rubin's rules (classical degrees of freedom).
pub fn estimate_imputed(
    imp: &ImputationSet,
    estimand: Estimand,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let covs = cfg.covariate_refs();
    let fits = imp
        .datasets
        .iter()
        .map(|d| estimate_frequentist(d, estimand, &covs, None, cfg.iv_options()))
        .collect::<Result<Vec<_>>>()?;
    let first = fits
        .first()
        .ok_or_else(|| Error::EmptySample("no imputed datasets".into()))?;
    let values: Vec<DVector<f64>> = fits.iter().map(|f| f.system.coefficients.clone()).collect();
    let covs_full: Vec<DMatrix<f64>> = fits.iter().map(|f| f.system.covariance.clone()).collect();
    let full = rubin_pool(&values, &covs_full)?;
    let thetas: Vec<DVector<f64>> = fits
        .iter()
        .map(|f| DVector::from_row_slice(&f.theta()))
        .collect();
    let pair_covs: Vec<DMatrix<f64>> = fits
        .iter()
        .map(|f| DMatrix::from_iterator(2, 2, f.covariance.iter().copied()))
        .collect();
    let pooled = rubin_pool(&thetas, &pair_covs)?;
    let total = Matrix2::new(
        pooled.total[(0, 0)],
        pooled.total[(0, 1)],
        pooled.total[(1, 0)],
        pooled.total[(1, 1)],
    );
    let theta = [pooled.estimate[0], pooled.estimate[1]];
    let mut cea = CeaResult::from_moments(
        theta[0],
        theta[1],
        &total,
        cfg.lambda,
        &first.label.to_string(),
        "mi",
    )?;
    let inb_df = inb_df(&pooled.within, &pooled.between, cfg.lambda, imp.m());
    let half = t_quantile_975(inb_df) * cea.inb_se;
    cea.interval = [cea.inb - half, cea.inb + half];
    let mut out = PipelineOutput {
        estimand,
        missing: MissingMethod::Mi,
        label: first.label,
        theta,
        std_error: [pooled.std_error(0), pooled.std_error(1)],
        covariance: to_array(&total),
        intervals: [pooled.interval(0), pooled.interval(1)],
        df: Some([pooled.df[0], pooled.df[1]]),
        nobs: first.nobs,
        n: first.nobs.max(imp.datasets[0].len()),
        coefficients: coefficient_table(first, &full.estimate, &full.total),
        first_stage: None,
        cea,
        mi: Some(MiSummary {
            m: imp.config.m,
            k: imp.config.k,
            cycles: imp.config.cycles,
            seed: imp.config.seed,
            imputed: std::array::from_fn(|s| imp.imputed[s].len()),
            df_method: "classical".into(),
            donor_violations: None,
        }),
        ipw: None,
        bayes: None,
        warnings: vec![],
        draws: None,
    };
    out.n = imp.datasets[0].len();
    Ok(out)
}

/// Classical Rubin degrees of freedom of `lambda * theta2 - theta1`.
fn inb_df(within: &DMatrix<f64>, between: &DMatrix<f64>, lambda: f64, m: usize) -> f64 {
    let a = [-1.0, lambda];
    let quad = |s: &DMatrix<f64>| {
        (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| a[i] * a[j] * s[(i, j)])
            .sum::<f64>()
    };
    let b = (1.0 + 1.0 / m as f64) * quad(between);
    if b <= 0.0 {
        return f64::INFINITY;
    }
    let r = quad(within) / b;
    (m - 1) as f64 * (1.0 + r) * (1.0 + r)
}

fn run_bayes(
    ds: &TrialDataset<f64>,
    augment: bool,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let mut bcfg = cfg.bayes.clone();
    bcfg.augment = augment;
    bcfg.covariates = cfg.covariates.clone();
    let draws = fit_bayes_iv(ds, &bcfg)?;
    let missing = if augment {
        MissingMethod::Bayes
    } else {
        MissingMethod::Cca
    };
    let mut cea = summarize_posterior(&draws, cfg.lambda)?;
    cea.missing_method = missing.name().into();
    let sd = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
    };
    let mut coefficients = Vec::new();
    let equations = ["treatment", "cost", "qaly"];
    for (k, name) in crate::bayes::BETA_NAMES.iter().enumerate() {
        let v = draws.beta(k);
        coefficients.push(Coefficient {
            equation: equations[k / 2].into(),
            name: name.to_string(),
            estimate: crate::cea::quantile_sorted(&crate::cea::sorted(&v), 0.5),
            std_error: sd(&v),
        });
    }
    let p = draws.covariates.len();
    for (e, eq) in equations.iter().enumerate() {
        for (j, c) in draws.covariates.iter().enumerate() {
            let v: Vec<f64> = draws.gamma.iter().map(|g| g[e * p + j]).collect();
            coefficients.push(Coefficient {
                equation: eq.to_string(),
                name: c.clone(),
                estimate: crate::cea::quantile_sorted(&crate::cea::sorted(&v), 0.5),
                std_error: sd(&v),
            });
        }
    }
    let cost = draws.cost_effect();
    let qaly = draws.qaly_effect();
    let output = PipelineOutput {
        estimand: Estimand::Bayes,
        missing,
        label: EstimandLabel::Cace,
        theta: [cea.delta_cost, cea.delta_qaly],
        std_error: [sd(&cost), sd(&qaly)],
        covariance: cea.covariance,
        intervals: [
            cea.cost_interval.expect("posterior summary has intervals"),
            cea.qaly_interval.expect("posterior summary has intervals"),
        ],
        df: None,
        nobs: draws.nobs,
        n: ds.len(),
        coefficients,
        first_stage: None,
        cea,
        mi: None,
        ipw: None,
        bayes: Some(BayesSummary {
            chains: bcfg.chains,
            iterations: bcfg.iterations,
            burn_in: bcfg.burn_in,
            thin: bcfg.thin,
            seed: bcfg.seed,
            draws: draws.len(),
            prior_sd: draws.prior_sd,
            wishart_df: draws.wishart_df,
            wishart_scale: draws.wishart_scale,
            acceptance: draws.acceptance.clone(),
            max_rhat: draws.max_rhat().map_or(f64::NAN, |(_, r)| r),
            diagnostics: draws.diagnostics.clone(),
        }),
        warnings: vec![],
        draws: Some(draws),
    };
    Ok(output)
}
