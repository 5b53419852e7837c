//! Trial simulator with principal strata, an unobserved confounder and
//! configurable monotone missingness.
//!
//! Each subject has a latent prognosis `U ~ N(0, 1)`. Compliance class is
//! read off a Gaussian-copula index `L = c_u U + c_age age_std + e`: the
//! lowest `p_always` of `Phi(L)` are always-takers, the highest `p_never`
//! never-takers and the rest compliers, so with `c_u > 0` those who refuse
//! treatment have better prognosis. Outcomes are linear in receipt, `U`,
//! baseline utility and age, with correlated normal errors. The treatment
//! effect is the same for everyone, so the complier effect equals
//! `(delta_cost, delta_qaly)` exactly.

use indexmap::IndexMap;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Cascade, TrialDataset, Variable};
use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};

pub const AGE: &str = "age";
pub const EVENT: &str = "event";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n: usize,
    pub p_complier: f64,
    pub p_never: f64,
    pub p_always: f64,
    /// Must be 0 (monotonicity).
    pub p_defier: f64,
    /// Loading of `U` on the compliance index; `|c_u| + |c_age| < 1`.
    pub stratum_u: f64,
    /// Loading of standardized age on the compliance index.
    pub stratum_age: f64,
    pub intercept_cost: f64,
    pub intercept_qaly: f64,
    pub delta_cost: f64,
    pub delta_qaly: f64,
    pub u_cost: f64,
    pub u_qaly: f64,
    pub eq5d0_mean: f64,
    pub eq5d0_sd: f64,
    /// Outcome slopes on centred baseline utility.
    pub eq5d0_cost: f64,
    pub eq5d0_qaly: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    /// Outcome slopes per standard deviation of age.
    pub age_cost: f64,
    pub age_qaly: f64,
    pub sd_cost: f64,
    pub sd_qaly: f64,
    /// Correlation of the two outcome errors.
    pub rho: f64,
    pub missingness: MissingnessConfig,
    /// Optional binary endpoint, written as the `event` covariate.
    pub binary: Option<BinaryOutcome>,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self::reference()
    }
}

/// Binary endpoint `logit P(event) = intercept + log_or d + age_coef age_std + u_coef U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryOutcome {
    pub intercept: f64,
    pub log_or: f64,
    #[serde(default)]
    pub age_coef: f64,
    #[serde(default)]
    pub u_coef: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    #[default]
    None,
    Mcar,
    Cdm,
    Mar,
    Mnar,
}

/// Observation model for one cascade stage among subjects still observed:
/// `logit P(observed) = intercept + sum coef * x`, with every `x` except the
/// indicators standardized by its sample moments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageModel {
    pub intercept: f64,
    pub z: f64,
    pub d: f64,
    pub age: f64,
    pub eq5d0: f64,
    pub cost: f64,
    pub qaly: f64,
}

impl StageModel {
    fn coef(&self, v: Variable) -> f64 {
        match v {
            Variable::Eq5d0 => self.eq5d0,
            Variable::Cost => self.cost,
            Variable::Qaly => self.qaly,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingnessConfig {
    pub mechanism: Mechanism,
    pub cascade: Cascade,
    /// One model per cascade position; `None` keeps every at-risk value.
    pub stages: [Option<StageModel>; 3],
}

impl MissingnessConfig {
    /// Each follow-up variable missing completely at random at `rate`
    /// (baseline utility stays complete).
    pub fn mcar(rate: f64) -> Self {
        let logit = ((1.0 - rate) / rate).ln();
        let cascade = Cascade::default();
        let mut stages: [Option<StageModel>; 3] = Default::default();
        stages[cascade.position(Variable::Cost)] = Some(StageModel {
            intercept: logit,
            ..Default::default()
        });
        Self {
            mechanism: Mechanism::Mcar,
            cascade,
            stages,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mechanism == Mechanism::None {
            return if self.stages.iter().any(Option::is_some) {
                Err(Error::Config("mechanism 'none' with stage models".into()))
            } else {
                Ok(())
            };
        }
        let order = self.cascade.order();
        for (pos, stage) in self.stages.iter().enumerate() {
            let Some(s) = stage else { continue };
            let target = order[pos];
            let baseline = s.z != 0.0 || s.d != 0.0 || s.age != 0.0;
            let mut earlier = false;
            let mut own = false;
            let mut later = false;
            for v in Variable::ALL {
                if s.coef(v) == 0.0 {
                    continue;
                }
                let p = self.cascade.position(v);
                if v == Variable::Eq5d0 && p < pos {
                    // observed baseline covariate
                } else if p < pos {
                    earlier = true;
                } else if p == pos {
                    own = true;
                } else {
                    later = true;
                }
            }
            let eq5d0_used = s.eq5d0 != 0.0 && self.cascade.position(Variable::Eq5d0) < pos;
            let ok = match self.mechanism {
                Mechanism::None => unreachable!(),
                Mechanism::Mcar => !(baseline || eq5d0_used || earlier || own || later),
                Mechanism::Cdm => !(earlier || own || later),
                Mechanism::Mar => !(own || later),
                Mechanism::Mnar => true,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "stage model for '{}' uses terms not allowed under {:?}",
                    target.name(),
                    self.mechanism
                )));
            }
        }
        Ok(())
    }
}

impl DgpConfig {
    /// Confounded-switching reference trial: 60% compliers, never-takers
    /// with better prognosis, correlated outcomes, complete data.
    pub fn reference() -> Self {
        Self {
            n: 2000,
            p_complier: 0.6,
            p_never: 0.25,
            p_always: 0.15,
            p_defier: 0.0,
            stratum_u: 0.6,
            stratum_age: 0.0,
            intercept_cost: 3000.0,
            intercept_qaly: 0.7,
            delta_cost: 1000.0,
            delta_qaly: 0.1,
            u_cost: -300.0,
            u_qaly: 0.05,
            eq5d0_mean: 0.6,
            eq5d0_sd: 0.25,
            eq5d0_cost: -400.0,
            eq5d0_qaly: 0.5,
            age_mean: 50.0,
            age_sd: 12.0,
            age_cost: 150.0,
            age_qaly: -0.02,
            sd_cost: 1000.0,
            sd_qaly: 0.2,
            rho: 0.5,
            missingness: MissingnessConfig::default(),
            binary: None,
            seed: 20240601,
        }
    }

    /// Reference trial with cost missing at random given observed QALYs and
    /// receipt; QALYs are complete, so the cascade runs baseline, QALY, cost.
    pub fn mar() -> Self {
        let cascade =
            Cascade::new([Variable::Eq5d0, Variable::Qaly, Variable::Cost]).expect("valid order");
        let mut stages: [Option<StageModel>; 3] = Default::default();
        stages[2] = Some(StageModel {
            intercept: 0.9,
            d: -0.8,
            qaly: 1.0,
            ..Default::default()
        });
        Self {
            missingness: MissingnessConfig {
                mechanism: Mechanism::Mar,
                cascade,
                stages,
            },
            ..Self::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("n must be at least 2".into()));
        }
        let p = [self.p_complier, self.p_never, self.p_always, self.p_defier];
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Config(format!(
                "stratum probabilities {p:?} must lie in [0, 1]"
            )));
        }
        if self.p_defier != 0.0 {
            return Err(Error::Config(
                "defier probability must be 0: receipt may not decrease with assignment".into(),
            ));
        }
        if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "stratum probabilities {p:?} must sum to 1"
            )));
        }
        if self.rho.abs() >= 1.0 {
            return Err(Error::Config(format!(
                "|rho| = {} must be < 1",
                self.rho.abs()
            )));
        }
        if self.stratum_u.abs() + self.stratum_age.abs() >= 1.0 {
            return Err(Error::Config(
                "|stratum_u| + |stratum_age| must be < 1".into(),
            ));
        }
        if !(self.sd_cost >= 0.0
            && self.sd_qaly >= 0.0
            && self.eq5d0_sd >= 0.0
            && self.age_sd > 0.0)
        {
            return Err(Error::Config(
                "standard deviations must be nonnegative (age_sd positive)".into(),
            ));
        }
        self.missingness.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Complier,
    NeverTaker,
    AlwaysTaker,
}

impl Stratum {
    /// Treatment received under assignment `z`.
    pub fn receipt(self, z: bool) -> bool {
        match self {
            Stratum::Complier => z,
            Stratum::NeverTaker => false,
            Stratum::AlwaysTaker => true,
        }
    }
}

/// Per-subject draws that fix everything except assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub z: Vec<bool>,
    pub u: Vec<f64>,
    pub stratum: Vec<Stratum>,
    pub eq5d0: Vec<f64>,
    pub age: Vec<f64>,
    pub e_cost: Vec<f64>,
    pub e_qaly: Vec<f64>,
    /// Uniform draws for the binary endpoint.
    pub event_u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpTruth {
    pub stratum: Vec<Stratum>,
    /// Potential outcomes under receipt 0 and 1.
    pub cost_d0: Vec<f64>,
    pub cost_d1: Vec<f64>,
    pub qaly_d0: Vec<f64>,
    pub qaly_d1: Vec<f64>,
    /// Complier effects `(cost, qaly)`.
    pub cace: [f64; 2],
    /// Population intention-to-treat effects.
    pub itt: [f64; 2],
    /// `E(D|Z=1) - E(D|Z=0)` in the population.
    pub compliance_difference: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_log_or: Option<f64>,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draw latent quantities for `cfg.n` subjects.
pub fn draw_latent(cfg: &DgpConfig, rng: &mut Rng) -> Latent {
    let n = cfg.n;
    let mut l = Latent {
        z: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
        stratum: Vec::with_capacity(n),
        eq5d0: Vec::with_capacity(n),
        age: Vec::with_capacity(n),
        e_cost: Vec::with_capacity(n),
        e_qaly: Vec::with_capacity(n),
        event_u: Vec::with_capacity(n),
    };
    let idio = (1.0 - cfg.stratum_u.powi(2) - cfg.stratum_age.powi(2))
        .max(0.0)
        .sqrt();
    let shared = cfg.rho.abs().sqrt();
    let own = (1.0 - cfg.rho.abs()).sqrt();
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let u = normal();
        let age_std = normal();
        let v = normal();
        let e0 = normal();
        let w = normal();
        let e1 = normal();
        let e2 = normal();
        draws.push((u, age_std, v, e0, w, e1, e2));
    }
    for (u, age_std, v, e0, w, e1, e2) in draws {
        let index = cfg.stratum_u * u + cfg.stratum_age * age_std + idio * v;
        let q = std_normal_cdf(index);
        let stratum = if q < cfg.p_always {
            Stratum::AlwaysTaker
        } else if q >= 1.0 - cfg.p_never {
            Stratum::NeverTaker
        } else {
            Stratum::Complier
        };
        l.u.push(u);
        l.age.push(cfg.age_mean + cfg.age_sd * age_std);
        l.stratum.push(stratum);
        l.eq5d0.push(cfg.eq5d0_mean + cfg.eq5d0_sd * e0);
        l.e_cost.push(cfg.sd_cost * (shared * w + own * e1));
        l.e_qaly
            .push(cfg.sd_qaly * (cfg.rho.signum() * shared * w + own * e2));
    }
    for _ in 0..n {
        l.z.push(rng.random_bool(0.5));
        l.event_u.push(rng.random::<f64>());
    }
    l
}

/// Potential outcomes `(cost, qaly)` of subject `i` under receipt `d`.
pub fn potential_outcomes(cfg: &DgpConfig, l: &Latent, i: usize, d: bool) -> (f64, f64) {
    let di = if d { 1.0 } else { 0.0 };
    let e0 = l.eq5d0[i] - cfg.eq5d0_mean;
    let a = (l.age[i] - cfg.age_mean) / cfg.age_sd;
    let cost = cfg.intercept_cost
        + cfg.delta_cost * di
        + cfg.u_cost * l.u[i]
        + cfg.eq5d0_cost * e0
        + cfg.age_cost * a
        + l.e_cost[i];
    let qaly = cfg.intercept_qaly
        + cfg.delta_qaly * di
        + cfg.u_qaly * l.u[i]
        + cfg.eq5d0_qaly * e0
        + cfg.age_qaly * a
        + l.e_qaly[i];
    (cost, qaly)
}

/// Observed (complete) dataset and truth from latent draws.
pub fn realize(cfg: &DgpConfig, l: &Latent) -> Result<(TrialDataset<f64>, DgpTruth)> {
    let n = l.z.len();
    let d: Vec<bool> = (0..n).map(|i| l.stratum[i].receipt(l.z[i])).collect();
    let mut truth = DgpTruth {
        stratum: l.stratum.clone(),
        cost_d0: Vec::with_capacity(n),
        cost_d1: Vec::with_capacity(n),
        qaly_d0: Vec::with_capacity(n),
        qaly_d1: Vec::with_capacity(n),
        cace: [cfg.delta_cost, cfg.delta_qaly],
        itt: [
            cfg.p_complier * cfg.delta_cost,
            cfg.p_complier * cfg.delta_qaly,
        ],
        compliance_difference: cfg.p_complier,
        event_log_or: cfg.binary.as_ref().map(|b| b.log_or),
    };
    let mut y1 = Vec::with_capacity(n);
    let mut y2 = Vec::with_capacity(n);
    for i in 0..n {
        let (c0, q0) = potential_outcomes(cfg, l, i, false);
        let (c1, q1) = potential_outcomes(cfg, l, i, true);
        truth.cost_d0.push(c0);
        truth.cost_d1.push(c1);
        truth.qaly_d0.push(q0);
        truth.qaly_d1.push(q1);
        y1.push(Some(if d[i] { c1 } else { c0 }));
        y2.push(Some(if d[i] { q1 } else { q0 }));
    }
    let mut cov = IndexMap::new();
    cov.insert(AGE.to_string(), l.age.iter().map(|&a| Some(a)).collect());
    if let Some(b) = &cfg.binary {
        let ev = (0..n)
            .map(|i| {
                let a = (l.age[i] - cfg.age_mean) / cfg.age_sd;
                let eta = b.intercept
                    + b.log_or * (d[i] as u8 as f64)
                    + b.age_coef * a
                    + b.u_coef * l.u[i];
                Some(if l.event_u[i] < sigmoid(eta) {
                    1.0
                } else {
                    0.0
                })
            })
            .collect();
        cov.insert(EVENT.to_string(), ev);
    }
    let eq5d0 = l.eq5d0.iter().map(|&v| Some(v)).collect();
    let ds = TrialDataset::new(l.z.clone(), d, y1, y2, eq5d0, cov)?;
    Ok((ds, truth))
}

/// Complete trial data and truth from an explicit generator.
pub fn generate_trial_with(
    cfg: &DgpConfig,
    rng: &mut Rng,
) -> Result<(TrialDataset<f64>, DgpTruth)> {
    cfg.validate()?;
    let latent = draw_latent(cfg, rng);
    realize(cfg, &latent)
}

/// Complete trial data and truth, seeded by `cfg.seed`.
pub fn generate_trial(cfg: &DgpConfig) -> Result<(TrialDataset<f64>, DgpTruth)> {
    generate_trial_with(cfg, &mut rng::substream(cfg.seed, &[tag::SIMULATE]))
}

fn standardized(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    if sd > 0.0 {
        v.iter().map(|x| (x - m) / sd).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Delete values following the configured cascade. Input must be complete.
pub fn apply_missingness_with(
    ds: &TrialDataset<f64>,
    cfg: &MissingnessConfig,
    rng: &mut Rng,
) -> Result<TrialDataset<f64>> {
    cfg.validate()?;
    let n = ds.len();
    let full = |v: Variable| -> Result<Vec<f64>> {
        ds.values(v)
            .iter()
            .map(|x| {
                x.ok_or_else(|| {
                    Error::InvalidInput("missingness must be applied to complete data".into())
                })
            })
            .collect()
    };
    let raw: [Vec<f64>; 3] = [
        full(Variable::Eq5d0)?,
        full(Variable::Cost)?,
        full(Variable::Qaly)?,
    ];
    let std_vals: [Vec<f64>; 3] = std::array::from_fn(|k| standardized(&raw[k]));
    let age = match ds.covariates().get(AGE) {
        Some(col) => standardized(&col.iter().map(|x| x.unwrap_or(0.0)).collect::<Vec<_>>()),
        None => vec![0.0; n],
    };
    let slot = |v: Variable| {
        Variable::ALL
            .iter()
            .position(|&x| x == v)
            .expect("variable")
    };
    let mut observed = [vec![true; n], vec![true; n], vec![true; n]];
    let mut still = vec![true; n];
    let mut min_p = 1.0f64;
    // draw a uniform for every subject and stage so the stream is layout-independent
    let uniforms: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    for (pos, &var) in cfg.cascade.order().iter().enumerate() {
        for i in 0..n {
            if !still[i] {
                observed[slot(var)][i] = false;
                continue;
            }
            let Some(s) = &cfg.stages[pos] else { continue };
            let eta = s.intercept
                + s.z * (ds.z()[i] as u8 as f64)
                + s.d * (ds.d()[i] as u8 as f64)
                + s.age * age[i]
                + Variable::ALL
                    .iter()
                    .map(|&v| s.coef(v) * std_vals[slot(v)][i])
                    .sum::<f64>();
            let p = sigmoid(eta);
            min_p = min_p.min(p);
            if uniforms[i][pos] >= p {
                observed[slot(var)][i] = false;
                still[i] = false;
            }
        }
    }
    if min_p < 1e-12 {
        log::warn!("observation probability {min_p:e} is effectively zero for some subjects; positivity fails");
    }
    let mask = |k: usize| -> Vec<Option<f64>> {
        (0..n)
            .map(|i| observed[k][i].then_some(raw[k][i]))
            .collect()
    };
    ds.with_values(Variable::Eq5d0, mask(0))?
        .with_values(Variable::Cost, mask(1))?
        .with_values(Variable::Qaly, mask(2))
}

/// Delete values using the stream derived from `seed`.
pub fn apply_missingness(
    ds: &TrialDataset<f64>,
    cfg: &MissingnessConfig,
    seed: u64,
) -> Result<TrialDataset<f64>> {
    apply_missingness_with(ds, cfg, &mut rng::substream(seed, &[tag::MISSINGNESS]))
}
