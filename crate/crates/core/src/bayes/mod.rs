//! Bayesian reduced-form IV model for two endpoints.
//!
//! `(D, Y1, Y2)` is trivariate normal with means
//! `(b00 + b10 z, b01 + b11 b10 z, b02 + b12 b10 z)` plus optional covariate
//! terms in every equation; `b11` and `b12` are the complier effects on cost
//! and QALYs. Coefficients get independent normal priors and `Sigma^-1` a
//! Wishart prior. The sampler alternates a conjugate Wishart draw for
//! `Sigma^-1` with a block random-walk Metropolis update of the mean
//! parameters whose proposal covariance is learned during burn-in and then
//! frozen. Outcomes and covariates are centred and scaled before sampling and
//! every draw is mapped back exactly.
//!
//! Missing outcomes and baseline utility can be handled by data
//! augmentation, with a normal model for baseline utility.

mod diagnostics;
mod wishart;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use diagnostics::{ess, split_rhat};
pub use wishart::wishart3;

use crate::cea::{self, CeaResult};
use crate::data::{TrialDataset, EQ5D0};
use crate::error::{Error, Result};
use crate::linreg::wls_solve;
use crate::rng::{self, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BayesIvConfig {
    /// Prior standard deviation of every (standardized) coefficient.
    pub prior_sd: f64,
    pub wishart_df: f64,
    pub wishart_scale: [[f64; 3]; 3],
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Multiplier on the `2.38^2 / dim` proposal scale.
    pub proposal_scale: f64,
    pub rhat_threshold: f64,
    pub covariates: Vec<String>,
    /// Impute missing outcomes and baseline utility inside the sampler;
    /// otherwise only complete cases are used.
    pub augment: bool,
    /// Original-scale prior on the cost effect, replacing the default.
    pub cost_effect_prior: Option<NormalPrior>,
    pub qaly_effect_prior: Option<NormalPrior>,
    /// Compute effective sample sizes (costly for long chains).
    pub compute_ess: bool,
}

impl Default for BayesIvConfig {
    fn default() -> Self {
        Self {
            prior_sd: 10.0,
            wishart_df: 4.0,
            wishart_scale: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            chains: 4,
            iterations: 10_000,
            burn_in: 5_000,
            thin: 1,
            seed: 0,
            proposal_scale: 1.0,
            rhat_threshold: 1.05,
            covariates: vec![],
            augment: false,
            cost_effect_prior: None,
            qaly_effect_prior: None,
            compute_ess: true,
        }
    }
}

impl BayesIvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 {
            return Err(Error::Config(
                "at least 2 chains are needed for split-Rhat".into(),
            ));
        }
        if self.iterations <= self.burn_in {
            return Err(Error::Config("iterations must exceed burn-in".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be positive".into()));
        }
        if self.wishart_df < 3.0 {
            return Err(Error::Config(
                "Wishart degrees of freedom must be at least 3".into(),
            ));
        }
        if !(self.prior_sd > 0.0) || !(self.proposal_scale > 0.0) {
            return Err(Error::Config(
                "prior_sd and proposal_scale must be positive".into(),
            ));
        }
        for p in [self.cost_effect_prior, self.qaly_effect_prior]
            .into_iter()
            .flatten()
        {
            if !(p.sd > 0.0) {
                return Err(Error::Config("effect prior sd must be positive".into()));
            }
        }
        let s = Matrix3::from_fn(|i, j| self.wishart_scale[i][j]);
        if (s - s.transpose()).amax() > 0.0 || s.cholesky().is_none() {
            return Err(Error::Config(
                "Wishart scale must be symmetric positive definite".into(),
            ));
        }
        Ok(())
    }

    pub fn draws_per_chain(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostic {
    pub name: String,
    pub rhat: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ess: Option<f64>,
}

pub const BETA_NAMES: [&str; 6] = ["beta00", "beta10", "beta01", "beta11", "beta02", "beta12"];

/// Retained draws on the original scale, chain-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub covariates: Vec<String>,
    /// `[b00, b10, b01, b11, b02, b12]` per draw.
    pub beta: Vec<[f64; 6]>,
    /// Covariate slopes per draw: treatment equation, cost, QALY.
    pub gamma: Vec<Vec<f64>>,
    pub sigma: Vec<[[f64; 3]; 3]>,
    /// Metropolis acceptance rate per chain after burn-in.
    pub acceptance: Vec<f64>,
    pub diagnostics: Vec<ParamDiagnostic>,
    pub nobs: usize,
    pub missing_method: String,
    pub prior_sd: f64,
    pub wishart_df: f64,
    pub wishart_scale: [[f64; 3]; 3],
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, k: usize) -> Vec<f64> {
        self.beta.iter().map(|b| b[k]).collect()
    }

    /// Draws of the complier cost effect `b11`.
    pub fn cost_effect(&self) -> Vec<f64> {
        self.beta(3)
    }

    /// Draws of the complier QALY effect `b12`.
    pub fn qaly_effect(&self) -> Vec<f64> {
        self.beta(5)
    }

    pub fn max_rhat(&self) -> Option<(&str, f64)> {
        self.diagnostics
            .iter()
            .filter(|d| !d.rhat.is_nan())
            .max_by(|a, b| a.rhat.total_cmp(&b.rhat))
            .map(|d| (d.name.as_str(), d.rhat))
    }

    fn chain_slices(values: &[f64], chains: usize, per: usize) -> Vec<&[f64]> {
        (0..chains)
            .map(|c| &values[c * per..(c + 1) * per])
            .collect()
    }

    fn compute_diagnostics(&mut self, with_ess: bool) {
        let p = self.covariates.len();
        let mut series: Vec<(String, Vec<f64>)> = BETA_NAMES
            .iter()
            .enumerate()
            .map(|(k, n)| (n.to_string(), self.beta(k)))
            .collect();
        for e in 0..3 {
            for (j, c) in self.covariates.iter().enumerate() {
                series.push((
                    format!("gamma{e}_{c}"),
                    self.gamma.iter().map(|g| g[e * p + j]).collect(),
                ));
            }
        }
        for i in 0..3 {
            for j in i..3 {
                series.push((
                    format!("sigma{i}{j}"),
                    self.sigma.iter().map(|s| s[i][j]).collect(),
                ));
            }
        }
        self.diagnostics = series
            .iter()
            .map(|(name, v)| {
                let ch = Self::chain_slices(v, self.chains, self.draws_per_chain);
                ParamDiagnostic {
                    name: name.clone(),
                    rhat: split_rhat(&ch),
                    ess: with_ess.then(|| ess(&ch)),
                }
            })
            .collect();
    }
}

/// Posterior medians and equal-tailed 95% intervals of the increments and INB.
pub fn summarize_posterior(draws: &PosteriorDraws, lambda: f64) -> Result<CeaResult<f64>> {
    cea::summarize_draws(
        &draws.cost_effect(),
        &draws.qaly_effect(),
        lambda,
        "CACE",
        &draws.missing_method,
    )
}

struct Scaling {
    m: [f64; 2],
    s: [f64; 2],
    mx: Vec<f64>,
    sx: Vec<f64>,
}

struct Data {
    p: usize,
    /// Regressor rows `[1, z, x...]` (standardized; NaN where missing).
    w: Vec<Vec<f64>>,
    /// Standardized `(d, y1, y2)`; NaN where missing.
    y: Vec<[f64; 3]>,
    incomplete: Vec<usize>,
    /// Position of baseline utility among the covariates, if modelled.
    eq_idx: Option<usize>,
    scaling: Scaling,
}

fn moments(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = v.collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    (m, if sd > 0.0 { sd } else { 1.0 })
}

fn prepare(ds: &TrialDataset<f64>, cfg: &BayesIvConfig) -> Result<Data> {
    let covs: Vec<&str> = cfg.covariates.iter().map(String::as_str).collect();
    let rows: Vec<usize> = if cfg.augment {
        for &c in &covs {
            if c != EQ5D0 && ds.column(c)?.iter().any(Option::is_none) {
                return Err(Error::InvalidInput(format!(
                    "covariate '{c}' has missing values; only baseline utility is modelled"
                )));
            }
        }
        (0..ds.len()).collect()
    } else {
        let mut needed = vec!["y1", "y2"];
        needed.extend_from_slice(&covs);
        ds.complete_rows(&needed)?
    };
    if rows.is_empty() {
        return Err(Error::EmptySample(
            "no subjects for the Bayesian model".into(),
        ));
    }
    crate::iv::check_relevance(ds, &rows)?;
    let col = |name: &str| -> Result<Vec<Option<f64>>> {
        let c = ds.column(name)?;
        Ok(rows.iter().map(|&i| c[i]).collect())
    };
    let y1 = col("y1")?;
    let y2 = col("y2")?;
    let xs: Vec<Vec<Option<f64>>> = covs.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let (m1, s1) = moments(y1.iter().flatten().copied());
    let (m2, s2) = moments(y2.iter().flatten().copied());
    if y1.iter().all(Option::is_none) || y2.iter().all(Option::is_none) {
        return Err(Error::EmptySample("an outcome is never observed".into()));
    }
    let (mx, sx): (Vec<f64>, Vec<f64>) = xs
        .iter()
        .map(|c| moments(c.iter().flatten().copied()))
        .unzip();
    let std = |v: Option<f64>, m: f64, s: f64| v.map_or(f64::NAN, |v| (v - m) / s);
    let mut w = Vec::with_capacity(rows.len());
    let mut y = Vec::with_capacity(rows.len());
    let mut incomplete = vec![];
    for (r, &i) in rows.iter().enumerate() {
        let mut row = vec![1.0, if ds.z()[i] { 1.0 } else { 0.0 }];
        row.extend((0..covs.len()).map(|j| std(xs[j][r], mx[j], sx[j])));
        let yi = [
            if ds.d()[i] { 1.0 } else { 0.0 },
            std(y1[r], m1, s1),
            std(y2[r], m2, s2),
        ];
        if row.iter().chain(&yi).any(|v| v.is_nan()) {
            incomplete.push(r);
        }
        w.push(row);
        y.push(yi);
    }
    Ok(Data {
        p: covs.len(),
        w,
        y,
        incomplete,
        eq_idx: covs.iter().position(|&c| c == EQ5D0),
        scaling: Scaling {
            m: [m1, m2],
            s: [s1, s2],
            mx,
            sx,
        },
    })
}

/// Cross-product statistics `W'W`, `W'Y`, `Y'Y`.
#[derive(Clone)]
struct Stats {
    ww: DMatrix<f64>,
    wy: DMatrix<f64>,
    yy: Matrix3<f64>,
    n: usize,
}

impl Stats {
    fn zeros(q: usize) -> Self {
        Self {
            ww: DMatrix::zeros(q, q),
            wy: DMatrix::zeros(q, 3),
            yy: Matrix3::zeros(),
            n: 0,
        }
    }

    fn add(&mut self, w: &[f64], y: &[f64; 3]) {
        let q = w.len();
        for a in 0..q {
            for b in 0..q {
                self.ww[(a, b)] += w[a] * w[b];
            }
            for l in 0..3 {
                self.wy[(a, l)] += w[a] * y[l];
            }
        }
        for l in 0..3 {
            for m in 0..3 {
                self.yy[(l, m)] += y[l] * y[m];
            }
        }
        self.n += 1;
    }

    fn combined(&self, other: &Stats) -> Stats {
        Stats {
            ww: &self.ww + &other.ww,
            wy: &self.wy + &other.wy,
            yy: self.yy + other.yy,
            n: self.n + other.n,
        }
    }
}

/// Mean-parameter matrix `M` (q x 3) with `mu_i = M' w_i`.
fn mean_matrix(theta: &[f64], p: usize) -> DMatrix<f64> {
    let q = 2 + p;
    let mut m = DMatrix::zeros(q, 3);
    m[(0, 0)] = theta[0];
    m[(1, 0)] = theta[1];
    m[(0, 1)] = theta[2];
    m[(1, 1)] = theta[3] * theta[1];
    m[(0, 2)] = theta[4];
    m[(1, 2)] = theta[5] * theta[1];
    for e in 0..3 {
        for j in 0..p {
            m[(2 + j, e)] = theta[6 + e * p + j];
        }
    }
    m
}

/// Residual cross-product `sum_i (y_i - M'w_i)(y_i - M'w_i)'`.
fn residual_cross(stats: &Stats, m: &DMatrix<f64>) -> Matrix3<f64> {
    let mwy = m.transpose() * &stats.wy;
    let mwwm = m.transpose() * &stats.ww * m;
    Matrix3::from_fn(|a, b| stats.yy[(a, b)] - mwy[(a, b)] - mwy[(b, a)] + mwwm[(a, b)])
}

fn trace_prod(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

struct Prior {
    mean: Vec<f64>,
    sd: Vec<f64>,
    v0_inv: Matrix3<f64>,
    df: f64,
}

impl Prior {
    fn log_density(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(t, (m, s))| -0.5 * ((t - m) / s).powi(2))
            .sum()
    }
}

struct Init {
    theta: Vec<f64>,
    se: Vec<f64>,
    omega: Matrix3<f64>,
    /// Starting values for missing cells, via the reduced-form fit.
    coef: DMatrix<f64>,
}

fn initial_values(data: &Data) -> Result<Init> {
    let q = 2 + data.p;
    let complete: Vec<usize> = (0..data.w.len())
        .filter(|&i| data.w[i].iter().chain(&data.y[i]).all(|v| !v.is_nan()))
        .collect();
    if complete.len() <= q + 1 {
        return Err(Error::EmptySample(
            "too few complete cases to initialise the sampler".into(),
        ));
    }
    let n = complete.len();
    let x = DMatrix::from_fn(n, q, |r, j| data.w[complete[r]][j]);
    let yv = DMatrix::from_fn(n, 3, |r, l| data.y[complete[r]][l]);
    let names: Vec<String> = (0..q).map(|j| format!("w{j}")).collect();
    let (coef, xtx_inv) = wls_solve(&x, &yv, &DVector::from_element(n, 1.0), &names)?;
    let resid = &yv - &x * &coef;
    let s = resid.transpose() * &resid / (n - q) as f64;
    let s3 = Matrix3::from_fn(|a, b| s[(a, b)]);
    let omega = s3
        .try_inverse()
        .filter(|o| o.cholesky().is_some())
        .ok_or(Error::SingularResidualCovariance)?;
    let se = |j: usize, l: usize| (s3[(l, l)] * xtx_inv[(j, j)]).sqrt();
    let b10 = coef[(1, 0)];
    let ratio = |l: usize| coef[(1, l)] / b10;
    let ratio_se =
        |l: usize| (se(1, l).powi(2) + ratio(l).powi(2) * se(1, 0).powi(2)).sqrt() / b10.abs();
    let mut theta = vec![
        coef[(0, 0)],
        b10,
        coef[(0, 1)],
        ratio(1),
        coef[(0, 2)],
        ratio(2),
    ];
    let mut sev = vec![
        se(0, 0),
        se(1, 0),
        se(0, 1),
        ratio_se(1),
        se(0, 2),
        ratio_se(2),
    ];
    for e in 0..3 {
        for j in 0..data.p {
            theta.push(coef[(2 + j, e)]);
            sev.push(se(2 + j, e));
        }
    }
    Ok(Init {
        theta,
        se: sev,
        omega,
        coef,
    })
}

struct ChainOut {
    theta: Vec<Vec<f64>>,
    sigma: Vec<Matrix3<f64>>,
    acceptance: f64,
}

/// Mutable augmentation state for incomplete rows.
struct Augment {
    w: Vec<Vec<f64>>,
    y: Vec<[f64; 3]>,
    /// Normal model for standardized baseline utility: (mean, variance).
    eq_model: (f64, f64),
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.l())
}

fn run_chain(
    data: &Data,
    cfg: &BayesIvConfig,
    prior: &Prior,
    init: &Init,
    base: &Stats,
    chain: usize,
) -> Result<ChainOut> {
    let mut rng = rng::substream(cfg.seed, &[tag::MCMC, chain as u64]);
    let dim = init.theta.len();
    let mut theta: Vec<f64> = init
        .theta
        .iter()
        .zip(&init.se)
        .map(|(t, s)| t + s * normal(&mut rng))
        .collect();
    let mut omega = init.omega;
    let p = data.p;

    let mut aug = Augment {
        w: data.incomplete.iter().map(|&i| data.w[i].clone()).collect(),
        y: data.incomplete.iter().map(|&i| data.y[i]).collect(),
        eq_model: (0.0, 1.0),
    };
    for (k, &i) in data.incomplete.iter().enumerate() {
        if let Some(j) = data.eq_idx {
            if aug.w[k][2 + j].is_nan() {
                aug.w[k][2 + j] = 0.0;
            }
        }
        let wk = &aug.w[k];
        for l in 0..3 {
            if aug.y[k][l].is_nan() {
                aug.y[k][l] = (0..wk.len()).map(|a| wk[a] * init.coef[(a, l)]).sum();
            }
        }
        debug_assert!(data.w[i].len() == wk.len());
    }
    let stats_of = |aug: &Augment| {
        let mut s = Stats::zeros(2 + p);
        for (w, y) in aug.w.iter().zip(&aug.y) {
            s.add(w, y);
        }
        base.combined(&s)
    };
    let mut stats = stats_of(&aug);

    let log_target = |theta: &[f64], stats: &Stats, omega: &Matrix3<f64>| -> f64 {
        let r = residual_cross(stats, &mean_matrix(theta, p));
        -0.5 * trace_prod(omega, &r) + prior.log_density(theta)
    };

    let base_scale = cfg.proposal_scale * 2.38 / (dim as f64).sqrt();
    let mut prop_cov =
        DMatrix::from_diagonal(&DVector::from_iterator(dim, init.se.iter().map(|s| s * s)));
    let mut prop_l = cholesky_lower(&prop_cov).ok_or(Error::SingularResidualCovariance)?;
    let mut log_scale = 0.0f64;
    let adapt_start = cfg.burn_in / 4;
    let mut n_adapt = 0usize;
    let mut mean_acc = DVector::<f64>::zeros(dim);
    let mut cov_acc = DMatrix::<f64>::zeros(dim, dim);

    let keep = cfg.draws_per_chain();
    let mut out = ChainOut {
        theta: Vec::with_capacity(keep),
        sigma: Vec::with_capacity(keep),
        acceptance: 0.0,
    };
    let mut accepted_after = 0usize;
    let mut cur_lp = log_target(&theta, &stats, &omega);

    for it in 0..cfg.iterations {
        if !data.incomplete.is_empty() {
            augment_step(data, &theta, &omega, &mut aug, &mut rng);
            stats = stats_of(&aug);
        }

        // Sigma^-1 | mean parameters
        let r = residual_cross(&stats, &mean_matrix(&theta, p));
        let post_scale = (prior.v0_inv + r)
            .try_inverse()
            .and_then(|s| s.cholesky())
            .ok_or(Error::SingularResidualCovariance)?;
        omega = wishart3(prior.df + stats.n as f64, &post_scale.l(), &mut rng);
        cur_lp = if data.incomplete.is_empty() {
            -0.5 * trace_prod(&omega, &r) + prior.log_density(&theta)
        } else {
            log_target(&theta, &stats, &omega)
        };

        // mean parameters | Sigma
        let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        let step = &prop_l * z * (base_scale * log_scale.exp());
        let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
        let cand_lp = log_target(&cand, &stats, &omega);
        let u: f64 = rng.random();
        let accept = u.ln() < cand_lp - cur_lp;
        if accept {
            theta = cand;
            cur_lp = cand_lp;
        }

        if it < cfg.burn_in {
            let t = (it + 1) as f64;
            log_scale += ((accept as u8 as f64) - 0.234) / t.sqrt().max(10.0);
            if it >= adapt_start {
                n_adapt += 1;
                let x = DVector::from_column_slice(&theta);
                let delta = &x - &mean_acc;
                mean_acc += &delta / n_adapt as f64;
                cov_acc += &delta * (&x - &mean_acc).transpose();
                if n_adapt >= 200 && n_adapt % 100 == 0 {
                    let mut c = &cov_acc / (n_adapt - 1) as f64;
                    for j in 0..dim {
                        c[(j, j)] += 1e-10 * (1.0 + c[(j, j)]);
                    }
                    if let Some(l) = cholesky_lower(&c) {
                        prop_cov = c;
                        prop_l = l;
                    }
                }
            }
        } else {
            accepted_after += accept as usize;
            if (it - cfg.burn_in) % cfg.thin == 0 {
                out.theta.push(theta.clone());
                let sigma = omega
                    .try_inverse()
                    .ok_or(Error::SingularResidualCovariance)?;
                out.sigma.push(sigma);
            }
        }
    }
    let _ = (&prop_cov, cur_lp);
    out.acceptance = accepted_after as f64 / (cfg.iterations - cfg.burn_in) as f64;
    Ok(out)
}

/// Draw missing baseline utility and outcomes for incomplete rows, then the
/// parameters of the baseline-utility model.
fn augment_step(
    data: &Data,
    theta: &[f64],
    omega: &Matrix3<f64>,
    aug: &mut Augment,
    rng: &mut Rng,
) {
    let p = data.p;
    let m = mean_matrix(theta, p);
    let sigma = omega.try_inverse().expect("positive definite precision");
    let (mu_e, var_e) = aug.eq_model;
    for (k, &i) in data.incomplete.iter().enumerate() {
        let obs_y: Vec<usize> = (0..3).filter(|&l| !data.y[i][l].is_nan()).collect();
        let mis_y: Vec<usize> = (0..3).filter(|&l| data.y[i][l].is_nan()).collect();
        let so = DMatrix::from_fn(obs_y.len(), obs_y.len(), |a, b| sigma[(obs_y[a], obs_y[b])]);
        let so_inv = so
            .try_inverse()
            .expect("principal submatrix of a PD matrix");
        if let Some(j) = data.eq_idx {
            if data.w[i][2 + j].is_nan() {
                // y_O = a_O + g_O e + err, e ~ N(mu_e, var_e)
                let mut wk = aug.w[k].clone();
                wk[2 + j] = 0.0;
                let a: Vec<f64> = obs_y
                    .iter()
                    .map(|&l| (0..wk.len()).map(|r| wk[r] * m[(r, l)]).sum())
                    .collect();
                let g = DVector::from_iterator(obs_y.len(), obs_y.iter().map(|&l| m[(2 + j, l)]));
                let resid = DVector::from_iterator(
                    obs_y.len(),
                    obs_y.iter().enumerate().map(|(t, &l)| data.y[i][l] - a[t]),
                );
                let sg = &so_inv * &g;
                let prec = 1.0 / var_e + g.dot(&sg);
                let mean = (mu_e / var_e + sg.dot(&resid)) / prec;
                let z: f64 = StandardNormal.sample(rng);
                aug.w[k][2 + j] = mean + z / prec.sqrt();
            }
        }
        if !mis_y.is_empty() {
            let wk = &aug.w[k];
            let mu: Vec<f64> = (0..3)
                .map(|l| (0..wk.len()).map(|r| wk[r] * m[(r, l)]).sum())
                .collect();
            let dev =
                DVector::from_iterator(obs_y.len(), obs_y.iter().map(|&l| data.y[i][l] - mu[l]));
            let smo =
                DMatrix::from_fn(mis_y.len(), obs_y.len(), |a, b| sigma[(mis_y[a], obs_y[b])]);
            let smm =
                DMatrix::from_fn(mis_y.len(), mis_y.len(), |a, b| sigma[(mis_y[a], mis_y[b])]);
            let cmean = &smo * &so_inv * dev;
            let ccov = smm - &smo * &so_inv * smo.transpose();
            let l = cholesky_lower(&ccov).expect("conditional covariance is PD");
            let z = DVector::from_fn(mis_y.len(), |_, _| StandardNormal.sample(rng));
            let draw = l * z;
            for (t, &lidx) in mis_y.iter().enumerate() {
                aug.y[k][lidx] = mu[lidx] + cmean[t] + draw[t];
            }
        }
    }
    if let Some(j) = data.eq_idx {
        // conjugate updates: mu_e ~ N(0, 10^2) prior, var_e ~ IG(1, 1)
        let mut sum = 0.0;
        let mut vals = Vec::with_capacity(data.w.len());
        let mut k = 0;
        for (i, w) in data.w.iter().enumerate() {
            let v = if k < data.incomplete.len() && data.incomplete[k] == i {
                k += 1;
                aug.w[k - 1][2 + j]
            } else {
                w[2 + j]
            };
            sum += v;
            vals.push(v);
        }
        let n = vals.len() as f64;
        let prec = n / var_e + 1.0 / 100.0;
        let mu_new = sum / var_e / prec + normal(rng) / prec.sqrt();
        let ss: f64 = vals.iter().map(|v| (v - mu_new).powi(2)).sum();
        let shape = 1.0 + n / 2.0;
        let rate = 1.0 + ss / 2.0;
        let g: f64 = Gamma::new(shape, 1.0 / rate)
            .expect("valid gamma")
            .sample(rng);
        aug.eq_model = (mu_new, 1.0 / g);
    }
}

/// Sample the joint posterior; errors if any split-Rhat exceeds the threshold.
pub fn fit_bayes_iv(ds: &TrialDataset<f64>, cfg: &BayesIvConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let data = prepare(ds, cfg)?;
    let p = data.p;
    let dim = 6 + 3 * p;
    let mut mean = vec![0.0; dim];
    let mut sd = vec![cfg.prior_sd; dim];
    let sc = &data.scaling;
    for (k, pr, s) in [
        (3, cfg.cost_effect_prior, sc.s[0]),
        (5, cfg.qaly_effect_prior, sc.s[1]),
    ] {
        if let Some(pr) = pr {
            mean[k] = pr.mean / s;
            sd[k] = pr.sd / s;
        }
    }
    let v0 = Matrix3::from_fn(|i, j| cfg.wishart_scale[i][j]);
    let prior = Prior {
        mean,
        sd,
        v0_inv: v0
            .try_inverse()
            .ok_or_else(|| Error::Config("Wishart scale is singular".into()))?,
        df: cfg.wishart_df,
    };
    let init = initial_values(&data)?;
    let mut base = Stats::zeros(2 + p);
    let mut inc = data.incomplete.iter().peekable();
    for i in 0..data.w.len() {
        if inc.peek() == Some(&&i) {
            inc.next();
            continue;
        }
        base.add(&data.w[i], &data.y[i]);
    }
    let outs = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(&data, cfg, &prior, &init, &base, c))
        .collect::<Result<Vec<_>>>()?;

    let per = outs[0].theta.len();
    let mut draws = PosteriorDraws {
        chains: cfg.chains,
        draws_per_chain: per,
        covariates: cfg.covariates.clone(),
        beta: Vec::with_capacity(per * cfg.chains),
        gamma: Vec::with_capacity(per * cfg.chains),
        sigma: Vec::with_capacity(per * cfg.chains),
        acceptance: outs.iter().map(|o| o.acceptance).collect(),
        diagnostics: vec![],
        nobs: data.w.len(),
        missing_method: if cfg.augment {
            "bayes".into()
        } else {
            "cca".into()
        },
        prior_sd: cfg.prior_sd,
        wishart_df: cfg.wishart_df,
        wishart_scale: cfg.wishart_scale,
    };
    for o in &outs {
        for (t, s) in o.theta.iter().zip(&o.sigma) {
            let (beta, gamma, sigma) = back_transform(t, s, sc, p);
            draws.beta.push(beta);
            draws.gamma.push(gamma);
            draws.sigma.push(sigma);
        }
    }
    draws.compute_diagnostics(cfg.compute_ess);
    if let Some((name, r)) = draws.max_rhat() {
        if r > cfg.rhat_threshold {
            return Err(Error::NotConverged {
                parameter: name.to_string(),
                max_rhat: r,
                draws: Box::new(draws),
            });
        }
    }
    Ok(draws)
}

fn back_transform(
    theta: &[f64],
    sigma: &Matrix3<f64>,
    sc: &Scaling,
    p: usize,
) -> ([f64; 6], Vec<f64>, [[f64; 3]; 3]) {
    let g = |e: usize, j: usize| theta[6 + e * p + j];
    let shift = |e: usize| (0..p).map(|j| g(e, j) * sc.mx[j] / sc.sx[j]).sum::<f64>();
    let beta = [
        theta[0] - shift(0),
        theta[1],
        sc.m[0] + sc.s[0] * (theta[2] - shift(1)),
        sc.s[0] * theta[3],
        sc.m[1] + sc.s[1] * (theta[4] - shift(2)),
        sc.s[1] * theta[5],
    ];
    let outer = [1.0, sc.s[0], sc.s[1]];
    let mut gamma = Vec::with_capacity(3 * p);
    for e in 0..3 {
        for j in 0..p {
            gamma.push(outer[e] * g(e, j) / sc.sx[j]);
        }
    }
    let sig = std::array::from_fn(|a| std::array::from_fn(|b| outer[a] * outer[b] * sigma[(a, b)]));
    (beta, gamma, sig)
}
