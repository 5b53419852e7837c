use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use cace_core::cea::{ceac_draws, ceac_normal, icer, parse_grid, CeacPoint, Icer};
use cace_core::data::{load_csv, write_csv, Cascade, Schema, Variable};
use cace_core::linreg::CovarianceKind;
use cace_core::mc::{self, McConfig};
use cace_core::missing::{
    donor_property_violations, mi_impute, pattern_mixture_offset, Deltas, MiConfig,
};
use cace_core::pipeline::{self, estimate_imputed, Estimand, MissingMethod, PipelineConfig};
use cace_core::sim::{generate_trial, DgpConfig};
use cace_core::{Cea, Dataset};

use crate::{
    CeaArgs, DataArgs, EstimateArgs, ImputeArgs, McArgs, MethodArgs, SensitivityArgs, SimulateArgs,
};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(p) => write(p, contents),
        None => {
            std::io::stdout().write_all(contents.as_bytes())?;
            Ok(())
        }
    }
}

fn load(args: &DataArgs) -> Result<Dataset> {
    let schema = match &args.schema {
        Some(s) => Schema::parse(s)?,
        None => Schema::default(),
    };
    load_csv(&args.data, &schema).with_context(|| format!("cannot load {}", args.data.display()))
}

fn pipeline_config(m: &MethodArgs) -> Result<(Estimand, MissingMethod, PipelineConfig)> {
    let estimand = Estimand::parse(&m.estimand)?;
    let missing = MissingMethod::parse(&m.missing)?;
    pipeline::check_combination(estimand, missing)?;
    let mut cfg: PipelineConfig = match &m.settings {
        Some(p) => serde_json::from_str(&read(p)?)
            .with_context(|| format!("invalid settings in {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if !m.covariates.is_empty() {
        cfg.covariates = m.covariates.clone();
    }
    if let Some(l) = m.lambda {
        cfg.lambda = l;
    }
    if m.classical {
        cfg.covariance = CovarianceKind::Classical;
    }
    if let Some(c) = &m.cascade {
        cfg.cascade = Cascade::parse(c)?;
    }
    let mi = &mut cfg.mi;
    mi.m = m.m.unwrap_or(mi.m);
    mi.k = m.k.unwrap_or(mi.k);
    mi.cycles = m.cycles.unwrap_or(mi.cycles);
    let b = &mut cfg.bayes;
    b.chains = m.chains.unwrap_or(b.chains);
    b.iterations = m.iters.unwrap_or(b.iterations);
    b.burn_in = m.burnin.unwrap_or(b.burn_in);
    b.thin = m.thin.unwrap_or(b.thin);
    if let Some(s) = m.seed {
        cfg.mi.seed = s;
        cfg.bayes.seed = s;
    }
    Ok((estimand, missing, cfg))
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => DgpConfig::from_json(&read(p)?)
            .with_context(|| format!("invalid configuration in {}", p.display()))?,
        None => DgpConfig::reference(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (ds, truth) = generate_trial(&cfg)?;
    let ds = if cfg.missingness.mechanism == cace_core::sim::Mechanism::None {
        ds
    } else {
        cace_core::sim::apply_missingness(&ds, &cfg.missingness, cfg.seed)?
    };
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf)?;
    fs::write(&a.out, buf).with_context(|| format!("cannot write {}", a.out.display()))?;
    if let Some(t) = &a.truth {
        write(t, &to_json(&truth)?)?;
    }
    log::info!("wrote {} subjects to {}", ds.len(), a.out.display());
    Ok(())
}

pub fn estimate(a: EstimateArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let (e, m, cfg) = pipeline_config(&a.method)?;
    let out = pipeline::run(&ds, e, m, &cfg)?;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    emit(a.out.as_deref(), &to_json(&out)?)
}

#[derive(Serialize)]
struct Manifest {
    source: String,
    m: usize,
    k: usize,
    cycles: usize,
    seed: u64,
    /// Imputed cells for eq5d0, cost and qaly.
    imputed: [usize; 3],
    donor_violations: usize,
    files: Vec<String>,
}

pub fn impute(a: ImputeArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let cfg = MiConfig {
        m: a.m,
        k: a.k,
        cycles: a.cycles,
        seed: a.seed,
        predictors: None,
    };
    let imp = mi_impute(&ds, &cfg)?;
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let width = a.m.to_string().len().max(3);
    let mut files = Vec::with_capacity(a.m);
    for (j, d) in imp.datasets.iter().enumerate() {
        let name = format!("imputed_{:0width$}.csv", j + 1);
        let mut buf = Vec::new();
        write_csv(d, &mut buf)?;
        let path = a.out_dir.join(&name);
        fs::write(&path, buf).with_context(|| format!("cannot write {}", path.display()))?;
        files.push(name);
    }
    let manifest = Manifest {
        source: a.data.data.display().to_string(),
        m: a.m,
        k: a.k,
        cycles: a.cycles,
        seed: a.seed,
        imputed: std::array::from_fn(|s| imp.imputed[s].len()),
        donor_violations: donor_property_violations(&ds, &imp),
        files,
    };
    write(&a.out_dir.join("manifest.json"), &to_json(&manifest)?)
}

#[derive(Serialize)]
struct SensitivityRow {
    delta_cost_a0: f64,
    delta_cost_a1: f64,
    delta_qaly_a0: f64,
    delta_qaly_a1: f64,
    delta_cost: f64,
    delta_qaly: f64,
    inb: f64,
    inb_se: f64,
    lower: f64,
    upper: f64,
}

#[derive(Serialize)]
struct SensitivityReport {
    estimand: Estimand,
    lambda: f64,
    m: usize,
    k: usize,
    seed: u64,
    rows: Vec<SensitivityRow>,
    warnings: Vec<String>,
}

fn or_zero(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        vec![0.0]
    } else {
        v.to_vec()
    }
}

pub fn sensitivity(a: SensitivityArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let (e, m, cfg) = pipeline_config(&a.method)?;
    if m != MissingMethod::Mi || e == Estimand::Bayes {
        bail!("the pattern-mixture sweep shifts imputed values: use --missing mi with a frequentist estimand");
    }
    let imp = mi_impute(&ds, &cfg.mi)?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &c0 in &or_zero(&a.delta_cost_a0) {
        for &c1 in &or_zero(&a.delta_cost_a1) {
            for &q0 in &or_zero(&a.delta_qaly_a0) {
                for &q1 in &or_zero(&a.delta_qaly_a1) {
                    let deltas = Deltas::zero()
                        .with(Variable::Cost, false, c0)
                        .with(Variable::Cost, true, c1)
                        .with(Variable::Qaly, false, q0)
                        .with(Variable::Qaly, true, q1);
                    let (shifted, w) = pattern_mixture_offset(&imp, &deltas)?;
                    for msg in w {
                        if !warnings.contains(&msg) {
                            warnings.push(msg);
                        }
                    }
                    let out = estimate_imputed(&shifted, e, &cfg)?;
                    rows.push(SensitivityRow {
                        delta_cost_a0: c0,
                        delta_cost_a1: c1,
                        delta_qaly_a0: q0,
                        delta_qaly_a1: q1,
                        delta_cost: out.theta[0],
                        delta_qaly: out.theta[1],
                        inb: out.cea.inb,
                        inb_se: out.cea.inb_se,
                        lower: out.cea.interval[0],
                        upper: out.cea.interval[1],
                    });
                }
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let table = String::from_utf8(w.into_inner()?)?;
    emit(a.out.as_deref(), &table)?;
    if let Some(j) = &a.json {
        let report = SensitivityReport {
            estimand: e,
            lambda: cfg.lambda,
            m: cfg.mi.m,
            k: cfg.mi.k,
            seed: cfg.mi.seed,
            rows,
            warnings,
        };
        write(j, &to_json(&report)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CeaReport {
    cea: Cea,
    #[serde(skip_serializing_if = "Option::is_none")]
    icer: Option<Icer<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    icer_error: Option<String>,
    ceac_method: &'static str,
    ceac: Vec<CeacPoint>,
}

pub fn cea(a: CeaArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let (e, m, cfg) = pipeline_config(&a.method)?;
    let grid = parse_grid(&a.grid)?;
    let out = pipeline::run(&ds, e, m, &cfg)?;
    let (ceac, method) = match &out.draws {
        Some(d) => (
            ceac_draws(&d.cost_effect(), &d.qaly_effect(), &grid)?,
            "draws",
        ),
        None => {
            let c = out.cea.cov_matrix();
            (
                ceac_normal(out.theta[0], out.theta[1], &c, &grid)?,
                "normal",
            )
        }
    };
    let (icer_value, icer_error) = match icer(out.theta[0], out.theta[1]) {
        Ok(v) => (Some(v), None),
        Err(err) => (None, Some(err.to_string())),
    };
    let report = CeaReport {
        cea: out.cea,
        icer: icer_value,
        icer_error,
        ceac_method: method,
        ceac,
    };
    if let Some(p) = &a.csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        for pt in &report.ceac {
            w.serialize(pt)?;
        }
        fs::write(p, w.into_inner()?).with_context(|| format!("cannot write {}", p.display()))?;
    }
    emit(a.out.as_deref(), &to_json(&report)?)
}

/// Returns whether every acceptance-tagged check passed.
pub fn mc(a: McArgs) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => McConfig::from_json(&read(p)?)
            .with_context(|| format!("invalid study in {}", p.display()))?,
        None => McConfig::default(),
    };
    if let Some(p) = &a.dgp {
        cfg.dgp = DgpConfig::from_json(&read(p)?)
            .with_context(|| format!("invalid configuration in {}", p.display()))?;
    }
    if !a.methods.is_empty() {
        cfg.methods = a
            .methods
            .iter()
            .map(|s| Estimand::parse(s))
            .collect::<Result<_, _>>()?;
    }
    if !a.missing.is_empty() {
        cfg.missing = a
            .missing
            .iter()
            .map(|s| MissingMethod::parse(s))
            .collect::<Result<_, _>>()?;
    }
    cfg.reps = a.reps.unwrap_or(cfg.reps);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    if a.workers.is_some() {
        cfg.workers = a.workers;
    }
    let (report, log) = mc::run_mc(&cfg)?;
    mc::write_report(&report, &a.out)?;
    if let Some(p) = &a.log {
        mc::write_log(&log, p)?;
    }
    for c in &report.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        eprintln!("{status} {}", c.message);
    }
    if report.degraded {
        log::warn!("at least one method failed on more than 10% of replicates");
    }
    Ok(report.all_checks_passed())
}
