//! Incremental net benefit, ICERs and cost-effectiveness acceptability curves.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iv::CaceEstimate;
use crate::scalar::Scalar;

/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    /// Cheaper and more effective.
    Dominant,
    /// Costlier and less effective.
    Dominated,
    /// Costlier and more effective.
    TradeOffNortheast,
    /// Cheaper and less effective.
    TradeOffSouthwest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Icer<T> {
    pub value: T,
    pub quadrant: Quadrant,
}

/// `d_cost / d_qaly` with its cost-effectiveness plane quadrant.
pub fn icer<T: Scalar>(d_cost: T, d_qaly: T) -> Result<Icer<T>> {
    if d_qaly == T::zero() {
        return Err(Error::UndefinedIcer);
    }
    let more_effective = d_qaly > T::zero();
    let quadrant = match (more_effective, d_cost <= T::zero()) {
        (true, true) => Quadrant::Dominant,
        (true, false) => Quadrant::TradeOffNortheast,
        (false, false) => Quadrant::Dominated,
        (false, true) => Quadrant::TradeOffSouthwest,
    };
    Ok(Icer {
        value: d_cost / d_qaly,
        quadrant,
    })
}

/// `(inb, var)` for `inb = lambda * d_qaly - d_cost`, with
/// `var = lambda^2 var(qaly) + var(cost) - 2 lambda cov`.
pub fn inb_moments<T: Scalar>(d_cost: T, d_qaly: T, cov: &Matrix2<T>, lambda: T) -> Result<(T, T)> {
    let inb = lambda * d_qaly - d_cost;
    let two = T::lit(2.0);
    let var = lambda * lambda * cov[(1, 1)] + cov[(0, 0)] - two * lambda * cov[(0, 1)];
    if var < T::zero() {
        return Err(Error::NegativeVariance {
            variance: var.as_f64(),
            covariance: [
                [cov[(0, 0)].as_f64(), cov[(0, 1)].as_f64()],
                [cov[(1, 0)].as_f64(), cov[(1, 1)].as_f64()],
            ],
        });
    }
    Ok((inb, var))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeaResult<T> {
    pub delta_cost: T,
    pub delta_qaly: T,
    /// Covariance of `(delta_cost, delta_qaly)`.
    pub covariance: [[T; 2]; 2],
    pub lambda: T,
    pub inb: T,
    pub inb_se: T,
    pub interval: [T; 2],
    /// Equal-tailed intervals for the two increments (Bayesian path only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_interval: Option<[T; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qaly_interval: Option<[T; 2]>,
    pub estimand: String,
    pub missing_method: String,
}

impl<T: Scalar> CeaResult<T> {
    /// Wald-type summary from point estimates and their joint covariance.
    pub fn from_moments(
        d_cost: T,
        d_qaly: T,
        cov: &Matrix2<T>,
        lambda: T,
        estimand: &str,
        missing_method: &str,
    ) -> Result<Self> {
        let (inb, var) = inb_moments(d_cost, d_qaly, cov, lambda)?;
        let se = var.sqrt();
        let half = T::lit(Z_975) * se;
        Ok(Self {
            delta_cost: d_cost,
            delta_qaly: d_qaly,
            covariance: [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]],
            lambda,
            inb,
            inb_se: se,
            interval: [inb - half, inb + half],
            cost_interval: None,
            qaly_interval: None,
            estimand: estimand.to_string(),
            missing_method: missing_method.to_string(),
        })
    }

    pub fn icer(&self) -> Result<Icer<T>> {
        icer(self.delta_cost, self.delta_qaly)
    }

    pub fn cov_matrix(&self) -> Matrix2<T> {
        let c = &self.covariance;
        Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1])
    }
}

/// Net-benefit summary of a frequentist estimate.
pub fn inb<T: Scalar>(
    est: &CaceEstimate<T>,
    lambda: T,
    missing_method: &str,
) -> Result<CeaResult<T>> {
    CeaResult::from_moments(
        est.theta1,
        est.theta2,
        &est.covariance,
        lambda,
        &est.label.to_string(),
        missing_method,
    )
}

/// Evenly spaced willingness-to-pay grid `start, start+step, ..., <= stop`.
pub fn lambda_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
        return Err(Error::InvalidInput(format!(
            "invalid grid {start}:{stop}:{step}"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + step * i as f64).collect())
}

/// Parse `start:stop:step`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("grid '{s}' is not start:stop:step")))?;
    match parts[..] {
        [a, b, c] => lambda_grid(a, b, c),
        _ => Err(Error::InvalidInput(format!(
            "grid '{s}' is not start:stop:step"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeacPoint {
    pub lambda: f64,
    pub probability: f64,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// `P(INB > 0)` under the normal approximation, `Phi(inb / se)`.
pub fn ceac_normal<T: Scalar>(
    d_cost: T,
    d_qaly: T,
    cov: &Matrix2<T>,
    grid: &[f64],
) -> Result<Vec<CeacPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty willingness-to-pay grid".into()));
    }
    grid.iter()
        .map(|&l| {
            let (m, v) = inb_moments(d_cost, d_qaly, cov, T::lit(l))?;
            let (m, sd) = (m.as_f64(), v.as_f64().sqrt());
            let probability = if sd > 0.0 {
                std_normal_cdf(m / sd)
            } else if m > 0.0 {
                1.0
            } else if m < 0.0 {
                0.0
            } else {
                0.5
            };
            Ok(CeacPoint {
                lambda: l,
                probability,
            })
        })
        .collect()
}

/// Fraction of draws with `lambda * qaly - cost > 0`.
pub fn ceac_draws(cost: &[f64], qaly: &[f64], grid: &[f64]) -> Result<Vec<CeacPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty willingness-to-pay grid".into()));
    }
    if cost.len() != qaly.len() || cost.is_empty() {
        return Err(Error::Dimension(
            "cost and QALY draws must be nonempty and equal length".into(),
        ));
    }
    let n = cost.len() as f64;
    Ok(grid
        .iter()
        .map(|&l| CeacPoint {
            lambda: l,
            probability: cost
                .iter()
                .zip(qaly)
                .filter(|&(&c, &q)| l * q - c > 0.0)
                .count() as f64
                / n,
        })
        .collect())
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub(crate) fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Posterior summary from paired draws of the two increments: medians and
/// equal-tailed 95% intervals for cost, QALY and per-draw INB.
pub fn summarize_draws(
    cost: &[f64],
    qaly: &[f64],
    lambda: f64,
    estimand: &str,
    missing_method: &str,
) -> Result<CeaResult<f64>> {
    if cost.len() != qaly.len() || cost.is_empty() {
        return Err(Error::EmptySample("no posterior draws".into()));
    }
    let n = cost.len() as f64;
    let inb: Vec<f64> = cost
        .iter()
        .zip(qaly)
        .map(|(&c, &q)| lambda * q - c)
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mc, mq, mi) = (mean(cost), mean(qaly), mean(&inb));
    let denom = (n - 1.0).max(1.0);
    let cov = |a: &[f64], ma: f64, b: &[f64], mb: f64| {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / denom
    };
    let (sc, sq, si) = (sorted(cost), sorted(qaly), sorted(&inb));
    let ci = |s: &[f64]| [quantile_sorted(s, 0.025), quantile_sorted(s, 0.975)];
    let cqc = cov(cost, mc, qaly, mq);
    Ok(CeaResult {
        delta_cost: quantile_sorted(&sc, 0.5),
        delta_qaly: quantile_sorted(&sq, 0.5),
        covariance: [
            [cov(cost, mc, cost, mc), cqc],
            [cqc, cov(qaly, mq, qaly, mq)],
        ],
        lambda,
        inb: quantile_sorted(&si, 0.5),
        inb_se: cov(&inb, mi, &inb, mi).sqrt(),
        interval: ci(&si),
        cost_interval: Some(ci(&sc)),
        qaly_interval: Some(ci(&sq)),
        estimand: estimand.to_string(),
        missing_method: missing_method.to_string(),
    })
}
