//! Monte Carlo bias and coverage harness.
//!
//! Each replicate draws its own substream from `(seed, replicate)`, so the
//! per-replicate log and every summary are identical whatever the thread
//! schedule. Failed fits are counted and excluded, never filled in.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cea::Z_975;
use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::pipeline::{self, Estimand, MissingMethod, PipelineConfig, PipelineOutput};
use crate::rng::{self, tag, Rng};
use crate::sim::{apply_missingness_with, generate_trial_with, DgpConfig, DgpTruth, Mechanism};

/// Failure share above which a cell is flagged degraded.
pub const DEGRADED_FAILURE_RATE: f64 = 0.10;

pub const PARAMETERS: [&str; 3] = ["cost", "qaly", "inb"];

/// Point estimate with its reported standard error and 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub estimate: f64,
    pub std_error: f64,
    pub interval: [f64; 2],
}

/// One (replicate, method, parameter) entry of the raw log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub estimator: String,
    pub missing: String,
    pub parameter: String,
    pub truth: f64,
    pub result: Option<Observation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub donor_violations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_rhat: Option<f64>,
}

/// Summary over replicates for one (estimator, missing-method, parameter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub estimator: String,
    pub missing: String,
    pub parameter: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Empirical SD / sqrt(successful replicates).
    pub mc_se: f64,
    pub emp_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    pub mean_width: f64,
    /// Successful replicates.
    pub reps: usize,
    pub failures: usize,
    pub degraded: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub donor_violations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_rhat: Option<f64>,
}

impl McCell {
    /// `|bias| / mc_se`.
    pub fn bias_in_mc_se(&self) -> f64 {
        self.bias.abs() / self.mc_se
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckKind {
    /// `|bias| < max_mc_se * mc_se`.
    Unbiased {
        max_mc_se: f64,
    },
    /// `|bias| > min_mc_se * mc_se`, optionally with a required sign.
    Biased {
        min_mc_se: f64,
        #[serde(default)]
        sign: Option<i8>,
    },
    Coverage {
        min: f64,
        max: f64,
    },
    /// Failure share at most `max`.
    Failures {
        max: f64,
    },
    /// No donor-property violations.
    Donors,
    /// Every retained run below the threshold.
    Rhat {
        max: f64,
    },
}

/// Acceptance-tagged condition on one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub estimator: String,
    pub missing: String,
    pub parameter: String,
    #[serde(flatten)]
    pub kind: CheckKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: Check,
    pub value: f64,
    pub passed: bool,
    pub message: String,
}

impl Check {
    pub fn evaluate(&self, cells: &[McCell]) -> CheckResult {
        let cell = cells.iter().find(|c| {
            c.estimator == self.estimator
                && c.missing == self.missing
                && c.parameter == self.parameter
        });
        let Some(c) = cell else {
            return CheckResult {
                check: self.clone(),
                value: f64::NAN,
                passed: false,
                message: format!(
                    "no cell {}/{}/{}",
                    self.estimator, self.missing, self.parameter
                ),
            };
        };
        let (value, passed, what) = match self.kind {
            CheckKind::Unbiased { max_mc_se } => {
                let v = c.bias_in_mc_se();
                (
                    v,
                    c.reps > 1 && v < max_mc_se,
                    format!("|bias| = {v:.3} MC SE (< {max_mc_se})"),
                )
            }
            CheckKind::Biased { min_mc_se, sign } => {
                let v = c.bias_in_mc_se();
                let sign_ok = sign.is_none_or(|s| c.bias.signum() == f64::from(s).signum());
                (
                    v,
                    c.reps > 1 && v > min_mc_se && sign_ok,
                    format!("|bias| = {v:.3} MC SE (> {min_mc_se}), bias {:.6}", c.bias),
                )
            }
            CheckKind::Coverage { min, max } => {
                let v = c.coverage;
                (
                    v,
                    c.reps > 0 && v >= min && v <= max,
                    format!("coverage {v:.4} in [{min}, {max}]"),
                )
            }
            CheckKind::Failures { max } => {
                let v = c.failures as f64 / (c.reps + c.failures).max(1) as f64;
                (v, v <= max, format!("failure share {v:.4} <= {max}"))
            }
            CheckKind::Donors => {
                let v = c.donor_violations.unwrap_or(usize::MAX) as f64;
                (
                    v,
                    c.donor_violations == Some(0),
                    format!("{v} donor violations"),
                )
            }
            CheckKind::Rhat { max } => {
                let v = c.max_rhat.unwrap_or(f64::NAN);
                (v, v < max, format!("max split-Rhat {v:.4} < {max}"))
            }
        };
        CheckResult {
            check: self.clone(),
            value,
            passed,
            message: format!(
                "{}/{}/{}: {what}",
                self.estimator, self.missing, self.parameter
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub dgp: DgpConfig,
    pub methods: Vec<Estimand>,
    pub missing: Vec<MissingMethod>,
    pub reps: usize,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub checks: Vec<Check>,
    /// Worker threads (`None`: rayon default).
    pub workers: Option<usize>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::reference(),
            methods: vec![],
            missing: vec![MissingMethod::Cca],
            reps: 1000,
            seed: 7,
            pipeline: PipelineConfig::default(),
            checks: vec![],
            workers: None,
        }
    }
}

impl McConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(Error::Config("at least 2 replicates are needed".into()));
        }
        self.dgp.validate()
    }

    /// Valid (estimand, missing) pairs in request order; pairs that make no
    /// sense together are skipped.
    pub fn combinations(&self) -> Vec<(Estimand, MissingMethod)> {
        let mut out = Vec::new();
        for &e in &self.methods {
            for &m in &self.missing {
                if pipeline::check_combination(e, m).is_ok() && !out.contains(&(e, m)) {
                    out.push((e, m));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub reps: usize,
    pub seed: u64,
    pub cells: Vec<McCell>,
    pub checks: Vec<CheckResult>,
    pub degraded: bool,
}

impl McReport {
    pub fn all_checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn cell(&self, estimator: &str, missing: &str, parameter: &str) -> Option<&McCell> {
        self.cells
            .iter()
            .find(|c| c.estimator == estimator && c.missing == missing && c.parameter == parameter)
    }
}

/// Run `f` for every replicate on its own substream and concatenate the
/// records in replicate order.
pub fn run_replicates<F>(
    reps: usize,
    seed: u64,
    workers: Option<usize>,
    f: F,
) -> Result<Vec<ReplicateRecord>>
where
    F: Fn(usize, &mut Rng) -> Vec<ReplicateRecord> + Sync + Send,
{
    let job = || {
        (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = rng::substream(seed, &[tag::REPLICATE, r as u64]);
                f(r, &mut rng)
            })
            .collect::<Vec<_>>()
    };
    let per = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(job),
        None => job(),
    };
    Ok(per.into_iter().flatten().collect())
}

/// Aggregate a replicate log into cells, keeping first-appearance order.
pub fn summarize(records: &[ReplicateRecord]) -> Vec<McCell> {
    let mut keys: Vec<(&str, &str, &str)> = Vec::new();
    for r in records {
        let k = (
            r.estimator.as_str(),
            r.missing.as_str(),
            r.parameter.as_str(),
        );
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(e, m, p)| {
            let rows: Vec<&ReplicateRecord> = records
                .iter()
                .filter(|r| r.estimator == e && r.missing == m && r.parameter == p)
                .collect();
            summarize_cell(e, m, p, &rows)
        })
        .collect()
}

fn summarize_cell(
    estimator: &str,
    missing: &str,
    parameter: &str,
    rows: &[&ReplicateRecord],
) -> McCell {
    let ok: Vec<(f64, Observation)> = rows
        .iter()
        .filter_map(|r| r.result.map(|o| (r.truth, o)))
        .collect();
    let failures = rows.len() - ok.len();
    let n = ok.len() as f64;
    let mean = ok.iter().map(|(_, o)| o.estimate).sum::<f64>() / n;
    let truth = ok.iter().map(|(t, _)| t).sum::<f64>() / n;
    let bias = ok.iter().map(|(t, o)| o.estimate - t).sum::<f64>() / n;
    let emp_sd = if ok.len() > 1 {
        (ok.iter()
            .map(|(_, o)| (o.estimate - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    } else {
        f64::NAN
    };
    let covered = ok
        .iter()
        .filter(|(t, o)| o.interval[0] <= *t && *t <= o.interval[1])
        .count();
    let donors: Vec<usize> = rows.iter().filter_map(|r| r.donor_violations).collect();
    let rhats: Vec<f64> = rows.iter().filter_map(|r| r.max_rhat).collect();
    McCell {
        estimator: estimator.into(),
        missing: missing.into(),
        parameter: parameter.into(),
        truth,
        mean,
        bias,
        mc_se: emp_sd / n.sqrt(),
        emp_sd,
        mean_se: ok.iter().map(|(_, o)| o.std_error).sum::<f64>() / n,
        coverage: covered as f64 / n,
        mean_width: ok
            .iter()
            .map(|(_, o)| o.interval[1] - o.interval[0])
            .sum::<f64>()
            / n,
        reps: ok.len(),
        failures,
        degraded: failures as f64 > DEGRADED_FAILURE_RATE * rows.len() as f64,
        donor_violations: (!donors.is_empty()).then(|| donors.iter().sum()),
        max_rhat: rhats.iter().copied().reduce(f64::max),
    }
}

fn report(reps: usize, seed: u64, records: &[ReplicateRecord], checks: &[Check]) -> McReport {
    let cells = summarize(records);
    let checks = checks.iter().map(|c| c.evaluate(&cells)).collect();
    McReport {
        reps,
        seed,
        degraded: cells.iter().any(|c| c.degraded),
        cells,
        checks,
    }
}

/// Targets for the three parameters of a method: ITT targets the
/// population intention-to-treat effect, everything else the complier effect.
fn truths(truth: &DgpTruth, estimand: Estimand, lambda: f64) -> [f64; 3] {
    let t = if estimand == Estimand::Itt {
        truth.itt
    } else {
        truth.cace
    };
    [t[0], t[1], lambda * t[1] - t[0]]
}

fn records_for(
    replicate: usize,
    estimand: Estimand,
    missing: MissingMethod,
    truth: [f64; 3],
    result: Result<PipelineOutput>,
) -> Vec<ReplicateRecord> {
    let base = |parameter: &str, t: f64| ReplicateRecord {
        replicate,
        estimator: estimand.name().into(),
        missing: missing.name().into(),
        parameter: parameter.into(),
        truth: t,
        result: None,
        error: None,
        donor_violations: None,
        max_rhat: None,
    };
    match result {
        Ok(out) => {
            let obs = [
                Observation {
                    estimate: out.theta[0],
                    std_error: out.std_error[0],
                    interval: out.intervals[0],
                },
                Observation {
                    estimate: out.theta[1],
                    std_error: out.std_error[1],
                    interval: out.intervals[1],
                },
                Observation {
                    estimate: out.cea.inb,
                    std_error: out.cea.inb_se,
                    interval: out.cea.interval,
                },
            ];
            let donors = out.mi.as_ref().and_then(|m| m.donor_violations);
            let rhat = out.max_rhat();
            PARAMETERS
                .iter()
                .zip(truth)
                .zip(obs)
                .map(|((p, t), o)| ReplicateRecord {
                    result: Some(o),
                    donor_violations: donors,
                    max_rhat: rhat,
                    ..base(p, t)
                })
                .collect()
        }
        Err(e) => {
            let msg = e.to_string();
            PARAMETERS
                .iter()
                .zip(truth)
                .map(|(p, t)| ReplicateRecord {
                    error: Some(msg.clone()),
                    ..base(p, t)
                })
                .collect()
        }
    }
}

/// Simulate one replicate dataset: trial, then missingness, each from its
/// own substream of the replicate stream.
pub fn replicate_data(dgp: &DgpConfig, rng: &mut Rng) -> Result<(TrialDataset<f64>, DgpTruth)> {
    use rand::Rng as _;
    let trial_seed: u64 = rng.random();
    let miss_seed: u64 = rng.random();
    let (ds, truth) = generate_trial_with(dgp, &mut rng::substream(trial_seed, &[tag::SIMULATE]))?;
    let ds = if dgp.missingness.mechanism == Mechanism::None {
        ds
    } else {
        apply_missingness_with(
            &ds,
            &dgp.missingness,
            &mut rng::substream(miss_seed, &[tag::MISSINGNESS]),
        )?
    };
    Ok((ds, truth))
}

/// Full harness: per replicate, simulate, then run every combination.
/// Stochastic methods get seeds derived from the replicate stream, and IPW
/// uses the simulated dropout order.
pub fn run_mc(cfg: &McConfig) -> Result<(McReport, Vec<ReplicateRecord>)> {
    cfg.validate()?;
    let combos = cfg.combinations();
    let lambda = cfg.pipeline.lambda;
    let records = run_replicates(cfg.reps, cfg.seed, cfg.workers, |r, rng| {
        use rand::Rng as _;
        let mi_seed: u64 = rng.random();
        let mcmc_seed: u64 = rng.random();
        let data = replicate_data(&cfg.dgp, rng);
        let mut pcfg = cfg.pipeline.clone();
        if cfg.dgp.missingness.mechanism != Mechanism::None {
            pcfg.cascade = cfg.dgp.missingness.cascade;
        }
        pcfg.mi.seed = mi_seed;
        pcfg.bayes.seed = mcmc_seed;
        let mut out = Vec::new();
        for &(e, m) in &combos {
            match &data {
                Ok((ds, truth)) => {
                    let res = pipeline::run(ds, e, m, &pcfg);
                    if let Err(err) = &res {
                        log::debug!("replicate {r} {e}/{m} failed: {err}");
                    }
                    out.extend(records_for(r, e, m, truths(truth, e, lambda), res));
                }
                Err(err) => {
                    let t = truths_from_config(&cfg.dgp, e, lambda);
                    out.extend(records_for(
                        r,
                        e,
                        m,
                        t,
                        Err(Error::InvalidInput(err.to_string())),
                    ));
                }
            }
        }
        out
    })?;
    Ok((report(cfg.reps, cfg.seed, &records, &cfg.checks), records))
}

fn truths_from_config(dgp: &DgpConfig, estimand: Estimand, lambda: f64) -> [f64; 3] {
    let scale = if estimand == Estimand::Itt {
        dgp.p_complier
    } else {
        1.0
    };
    let t = [dgp.delta_cost * scale, dgp.delta_qaly * scale];
    [t[0], t[1], lambda * t[1] - t[0]]
}

/// Harness calibration problem: the mean of `n` draws from `N(mu, 1)` with
/// its known-variance z interval.
pub fn normal_mean_toy(
    reps: usize,
    n: usize,
    mu: f64,
    seed: u64,
) -> Result<(McReport, Vec<ReplicateRecord>)> {
    if reps < 2 || n == 0 {
        return Err(Error::Config(
            "need at least 2 replicates and 1 draw".into(),
        ));
    }
    let se = 1.0 / (n as f64).sqrt();
    let records = run_replicates(reps, seed, None, |r, rng| {
        let mean = (0..n)
            .map(|_| mu + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .sum::<f64>()
            / n as f64;
        vec![ReplicateRecord {
            replicate: r,
            estimator: "sample-mean".into(),
            missing: "none".into(),
            parameter: "mean".into(),
            truth: mu,
            result: Some(Observation {
                estimate: mean,
                std_error: se,
                interval: [mean - Z_975 * se, mean + Z_975 * se],
            }),
            error: None,
            donor_violations: None,
            max_rhat: None,
        }]
    })?;
    Ok((report(reps, seed, &records, &[]), records))
}

/// `[lo, hi]` containing a binomial(reps, p) proportion with probability
/// about `level`, from the normal approximation.
pub fn binomial_band(p: f64, reps: usize, z: f64) -> [f64; 2] {
    let h = z * (p * (1.0 - p) / reps as f64).sqrt();
    [p - h, p + h]
}

pub fn report_json(rep: &McReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(rep)?;
    s.push('\n');
    Ok(s)
}

pub fn write_report(rep: &McReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report_json(rep)?).map_err(|e| Error::io(path, e))
}

/// Raw log as JSON lines.
pub fn write_log(records: &[ReplicateRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(rep: usize, est: f64, truth: f64, ok: bool) -> ReplicateRecord {
        ReplicateRecord {
            replicate: rep,
            estimator: "e".into(),
            missing: "cca".into(),
            parameter: "cost".into(),
            truth,
            result: ok.then_some(Observation {
                estimate: est,
                std_error: 1.0,
                interval: [est - 1.0, est + 1.0],
            }),
            error: (!ok).then(|| "boom".into()),
            donor_violations: None,
            max_rhat: None,
        }
    }

    #[test]
    fn cell_statistics_by_hand() {
        let recs = vec![
            rec(0, 1.0, 0.0, true),
            rec(1, 3.0, 0.0, true),
            rec(2, 0.0, 0.0, false),
        ];
        let c = &summarize(&recs)[0];
        assert_eq!(c.mean, 2.0);
        assert_eq!(c.bias, 2.0);
        assert_eq!(c.emp_sd, 2f64.sqrt());
        assert_eq!(c.mc_se, 1.0);
        assert_eq!(c.coverage, 0.5);
        assert_eq!(c.mean_width, 2.0);
        assert_eq!((c.reps, c.failures), (2, 1));
        assert!(c.degraded);
    }

    #[test]
    fn empty_method_list_gives_empty_cells() {
        let cfg = McConfig {
            reps: 3,
            ..Default::default()
        };
        let (rep, log) = run_mc(&cfg).unwrap();
        assert!(rep.cells.is_empty() && log.is_empty());
        let v: serde_json::Value = serde_json::from_str(&report_json(&rep).unwrap()).unwrap();
        assert_eq!(v["cells"], serde_json::json!([]));
    }

    #[test]
    fn toy_is_deterministic_and_round_trips() {
        let (a, _) = normal_mean_toy(200, 10, 0.0, 1).unwrap();
        let (b, _) = normal_mean_toy(200, 10, 0.0, 1).unwrap();
        let ja = report_json(&a).unwrap();
        assert_eq!(ja, report_json(&b).unwrap());
        let back: McReport = serde_json::from_str(&ja).unwrap();
        assert_eq!(back.cells[0].coverage, a.cells[0].coverage);
    }

    #[test]
    fn schedule_does_not_change_results() {
        let cfg = McConfig {
            dgp: DgpConfig {
                n: 300,
                ..DgpConfig::reference()
            },
            methods: vec![Estimand::Cace3sls, Estimand::Itt],
            reps: 6,
            ..Default::default()
        };
        let one = McConfig {
            workers: Some(1),
            ..cfg.clone()
        };
        let (a, la) = run_mc(&cfg).unwrap();
        let (b, lb) = run_mc(&one).unwrap();
        assert_eq!(la, lb);
        assert_eq!(report_json(&a).unwrap(), report_json(&b).unwrap());
    }

    #[test]
    fn checks_evaluate_against_cells() {
        let recs = vec![rec(0, 1.0, 0.0, true), rec(1, 3.0, 0.0, true)];
        let cells = summarize(&recs);
        let check = |kind| Check {
            estimator: "e".into(),
            missing: "cca".into(),
            parameter: "cost".into(),
            kind,
        };
        assert!(
            !check(CheckKind::Unbiased { max_mc_se: 1.5 })
                .evaluate(&cells)
                .passed
        );
        assert!(
            check(CheckKind::Biased {
                min_mc_se: 1.5,
                sign: Some(1)
            })
            .evaluate(&cells)
            .passed
        );
        assert!(
            !check(CheckKind::Biased {
                min_mc_se: 1.5,
                sign: Some(-1)
            })
            .evaluate(&cells)
            .passed
        );
        assert!(
            check(CheckKind::Coverage { min: 0.4, max: 0.6 })
                .evaluate(&cells)
                .passed
        );
        let missing = Check {
            estimator: "x".into(),
            ..check(CheckKind::Donors)
        };
        assert!(!missing.evaluate(&cells).passed);
    }

    #[test]
    fn log_recomputes_summary() {
        let (rep, log) = normal_mean_toy(50, 5, 1.0, 9).unwrap();
        let json: Vec<ReplicateRecord> = log
            .iter()
            .map(|r| serde_json::from_str(&serde_json::to_string(r).unwrap()).unwrap())
            .collect();
        assert_eq!(summarize(&json), rep.cells);
    }
}
