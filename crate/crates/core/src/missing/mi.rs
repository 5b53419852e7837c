use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{TrialDataset, Variable};
use crate::error::{Error, Result};
use crate::linreg::wls_solve;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    /// Number of completed datasets.
    pub m: usize,
    /// Donor pool size for predictive mean matching.
    pub k: usize,
    /// Chained-equation cycles per imputation.
    pub cycles: usize,
    pub seed: u64,
    /// Extra fully observed covariates used as imputation predictors
    /// (`None`: every complete extra covariate).
    #[serde(default)]
    pub predictors: Option<Vec<String>>,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            m: 50,
            k: 5,
            cycles: 10,
            seed: 0,
            predictors: None,
        }
    }
}

/// `M` completed copies of a dataset.
#[derive(Debug, Clone)]
pub struct ImputationSet {
    pub datasets: Vec<TrialDataset<f64>>,
    /// Rows imputed for each variable, indexed like [`Variable::ALL`].
    pub imputed: [Vec<usize>; 3],
    pub config: MiConfig,
}

impl ImputationSet {
    pub fn imputed_rows(&self, var: Variable) -> &[usize] {
        &self.imputed[var_slot(var)]
    }

    pub fn m(&self) -> usize {
        self.datasets.len()
    }
}

pub(crate) fn var_slot(v: Variable) -> usize {
    Variable::ALL
        .iter()
        .position(|&x| x == v)
        .expect("known variable")
}

/// Fully conditional specification with predictive mean matching, stratified
/// by randomised arm. Each imputation uses its own seeded substream, so the
/// result does not depend on scheduling.
pub fn mi_impute(ds: &TrialDataset<f64>, cfg: &MiConfig) -> Result<ImputationSet> {
    if cfg.m == 0 || cfg.k == 0 || cfg.cycles == 0 {
        return Err(Error::Config("m, k and cycles must all be positive".into()));
    }
    let extras: Vec<String> = match &cfg.predictors {
        Some(p) => {
            for name in p {
                if ds.column(name)?.iter().any(Option::is_none) {
                    return Err(Error::Config(format!(
                        "imputation predictor '{name}' has missing values"
                    )));
                }
            }
            p.clone()
        }
        None => ds
            .covariates()
            .iter()
            .filter(|(name, col)| {
                let complete = col.iter().all(Option::is_some);
                if !complete {
                    log::warn!("covariate '{name}' is incomplete and is not used to impute");
                }
                complete
            })
            .map(|(name, _)| name.clone())
            .collect(),
    };
    let extra_cols: Vec<Vec<f64>> = extras
        .iter()
        .map(|n| {
            ds.column(n)
                .map(|c| c.into_iter().map(|v| v.expect("complete")).collect())
        })
        .collect::<Result<_>>()?;
    let imputed: [Vec<usize>; 3] = std::array::from_fn(|s| {
        (0..ds.len())
            .filter(|&i| ds.values(Variable::ALL[s])[i].is_none())
            .collect()
    });

    if imputed.iter().all(Vec::is_empty) {
        return Ok(ImputationSet {
            datasets: vec![ds.clone(); cfg.m],
            imputed,
            config: cfg.clone(),
        });
    }
    for arm in [false, true] {
        for var in Variable::ALL {
            let vals = ds.values(var);
            let rows = (0..ds.len()).filter(|&i| ds.z()[i] == arm);
            let (obs, mis) = rows.fold((0, 0), |(o, m), i| {
                if vals[i].is_some() {
                    (o + 1, m)
                } else {
                    (o, m + 1)
                }
            });
            if mis > 0 && obs < cfg.k {
                return Err(Error::TooFewDonors {
                    arm: arm as u8,
                    variable: var.name().into(),
                    available: obs,
                    k: cfg.k,
                });
            }
        }
    }

    let datasets = (0..cfg.m)
        .into_par_iter()
        .map(|j| {
            let mut rng = rng::substream(cfg.seed, &[rng::tag::IMPUTE, j as u64]);
            impute_once(ds, cfg, &extra_cols, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImputationSet {
        datasets,
        imputed,
        config: cfg.clone(),
    })
}

fn impute_once(
    ds: &TrialDataset<f64>,
    cfg: &MiConfig,
    extras: &[Vec<f64>],
    rng: &mut Rng,
) -> Result<TrialDataset<f64>> {
    let mut work: [Vec<f64>; 3] = std::array::from_fn(|s| {
        ds.values(Variable::ALL[s])
            .iter()
            .map(|v| v.unwrap_or(f64::NAN))
            .collect()
    });
    for arm in [false, true] {
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.z()[i] == arm).collect();
        if rows.is_empty() {
            continue;
        }
        // incomplete variables, least missingness first
        let mut order: Vec<(usize, Vec<usize>, Vec<usize>)> = (0..3)
            .filter_map(|s| {
                let vals = ds.values(Variable::ALL[s]);
                let (obs, mis): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| vals[i].is_some());
                (!mis.is_empty()).then_some((s, obs, mis))
            })
            .collect();
        order.sort_by_key(|(_, _, mis)| mis.len());
        for (s, obs, mis) in &order {
            for &i in mis {
                work[*s][i] = work[*s][obs[rng.random_range(0..obs.len())]];
            }
        }
        let include_d = rows.iter().any(|&i| ds.d()[i]) && rows.iter().any(|&i| !ds.d()[i]);
        let cycles = if order.len() == 1 { 1 } else { cfg.cycles };
        for _ in 0..cycles {
            for (s, obs, mis) in &order {
                let predictors = |i: usize| -> Vec<f64> {
                    let mut x = vec![1.0];
                    if include_d {
                        x.push(if ds.d()[i] { 1.0 } else { 0.0 });
                    }
                    x.extend((0..3).filter(|t| t != s).map(|t| work[t][i]));
                    x.extend(extras.iter().map(|c| c[i]));
                    x
                };
                let donors_x: Vec<Vec<f64>> = obs.iter().map(|&i| predictors(i)).collect();
                let recip_x: Vec<Vec<f64>> = mis.iter().map(|&i| predictors(i)).collect();
                let y: Vec<f64> = obs.iter().map(|&i| work[*s][i]).collect();
                let draws = pmm_step(&donors_x, &y, &recip_x, cfg.k, rng, Variable::ALL[*s], arm)?;
                for (&i, d) in mis.iter().zip(draws) {
                    work[*s][i] = y[d];
                }
            }
        }
    }
    let mut out = ds.clone();
    for s in 0..3 {
        let var = Variable::ALL[s];
        let col: Vec<Option<f64>> = work[s].iter().map(|&v| Some(v)).collect();
        out = out.with_values(var, col)?;
    }
    Ok(out)
}

/// One predictive-mean-matching update. Returns, for each recipient, the
/// index of the donor whose observed value it receives.
fn pmm_step(
    donors_x: &[Vec<f64>],
    y: &[f64],
    recip_x: &[Vec<f64>],
    k: usize,
    rng: &mut Rng,
    var: Variable,
    arm: bool,
) -> Result<Vec<usize>> {
    let n = donors_x.len();
    let p = donors_x[0].len();
    let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    if n <= p {
        return Err(Error::TooFewDonors {
            arm: arm as u8,
            variable: var.name().into(),
            available: n,
            k: p + 1,
        });
    }
    let x = DMatrix::from_fn(n, p, |i, j| donors_x[i][j]);
    let yv = DMatrix::from_column_slice(n, 1, y);
    let (beta, xtx_inv) =
        wls_solve(&x, &yv, &DVector::from_element(n, 1.0), &names).map_err(|e| match e {
            Error::Singular { .. } => Error::InvalidInput(format!(
                "imputation model for '{}' in arm z={} is rank deficient",
                var.name(),
                arm as u8
            )),
            other => other,
        })?;
    let beta = beta.column(0).into_owned();
    let fitted = &x * &beta;
    let rss = (DVector::from_column_slice(y) - &fitted).norm_squared();
    // sigma*^2 = RSS / chi2(n - p); beta* ~ N(beta_hat, sigma*^2 (X'X)^-1)
    let chi: f64 = ChiSquared::new((n - p) as f64)
        .map_err(|e| Error::InvalidInput(e.to_string()))?
        .sample(rng);
    let sigma = (rss / chi).sqrt();
    let chol = xtx_inv.cholesky().ok_or_else(|| {
        Error::InvalidInput("imputation model covariance is not positive definite".into())
    })?;
    let u = DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
    let beta_star = &beta + chol.l() * u * sigma;

    // donors sorted by predicted mean, ties by a random key
    let mut order: Vec<(f64, u64, usize)> = (0..n)
        .map(|i| (fitted[i], rng.random::<u64>(), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let preds: Vec<f64> = order.iter().map(|o| o.0).collect();
    let k = k.min(n);
    let mut out = Vec::with_capacity(recip_x.len());
    let mut pool = Vec::with_capacity(k);
    for rx in recip_x {
        let target: f64 = rx.iter().zip(beta_star.iter()).map(|(a, b)| a * b).sum();
        let pos = preds.partition_point(|&v| v < target);
        let (mut lo, mut hi) = (pos, pos);
        pool.clear();
        while pool.len() < k {
            let left = (lo > 0).then(|| (target - preds[lo - 1], order[lo - 1].1));
            let right = (hi < n).then(|| (preds[hi] - target, order[hi].1));
            let take_left = match (left, right) {
                (Some(l), Some(r)) => l.0 < r.0 || (l.0 == r.0 && l.1 < r.1),
                (Some(_), None) => true,
                (None, _) => false,
            };
            if take_left {
                lo -= 1;
                pool.push(order[lo].2);
            } else {
                pool.push(order[hi].2);
                hi += 1;
            }
        }
        out.push(pool[rng.random_range(0..pool.len())]);
    }
    Ok(out)
}

/// Count imputed cells whose value is not an observed value of the same
/// variable within the same randomised arm.
pub fn donor_property_violations(original: &TrialDataset<f64>, imp: &ImputationSet) -> usize {
    let mut bad = 0;
    for var in Variable::ALL {
        let vals = original.values(var);
        let observed: [HashSet<u64>; 2] = std::array::from_fn(|a| {
            (0..original.len())
                .filter(|&i| original.z()[i] as usize == a)
                .filter_map(|i| vals[i].map(f64::to_bits))
                .collect()
        });
        for ds in &imp.datasets {
            let done = ds.values(var);
            for &i in imp.imputed_rows(var) {
                let ok = done[i]
                    .is_some_and(|v| observed[original.z()[i] as usize].contains(&v.to_bits()));
                bad += !ok as usize;
            }
        }
    }
    bad
}
