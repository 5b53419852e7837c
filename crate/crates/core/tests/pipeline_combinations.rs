use cace_core::data::{Outcome, TrialDataset};
use cace_core::iv::{tsls, wald_cace, IvOptions};
use cace_core::linreg::CovarianceKind;
use cace_core::pipeline::{run, Estimand, MissingMethod, PipelineConfig};
use cace_core::sim::{apply_missingness, generate_trial, DgpConfig};

fn small_mar() -> (cace_core::Dataset, DgpConfig) {
    let cfg = DgpConfig {
        n: 600,
        seed: 3,
        ..DgpConfig::mar()
    };
    let (ds, _) = generate_trial(&cfg).unwrap();
    let ds = apply_missingness(&ds, &cfg.missingness, cfg.seed).unwrap();
    (ds, cfg)
}

fn config(dgp: &DgpConfig) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        covariates: vec!["eq5d0".into()],
        cascade: dgp.missingness.cascade.clone(),
        ..Default::default()
    };
    cfg.mi.m = 5;
    cfg
}

#[test]
fn every_valid_combination_runs_and_is_deterministic() {
    let (ds, dgp) = small_mar();
    let cfg = config(&dgp);
    for e in Estimand::ALL {
        for m in MissingMethod::ALL {
            let valid = match m {
                MissingMethod::Bayes => e == Estimand::Bayes,
                MissingMethod::Ipw | MissingMethod::Mi => e != Estimand::Bayes,
                MissingMethod::Cca => true,
            };
            let a = run(&ds, e, m, &cfg);
            if !valid {
                assert!(a.is_err(), "{e}/{m} should be rejected");
                continue;
            }
            let a = a.unwrap_or_else(|err| panic!("{e}/{m}: {err}"));
            let b = run(&ds, e, m, &cfg).unwrap();
            assert_eq!(
                serde_json::to_string(&a).unwrap(),
                serde_json::to_string(&b).unwrap(),
                "{e}/{m}"
            );
            assert!(a.theta.iter().all(|t| t.is_finite()));
            assert!(a.std_error.iter().all(|s| *s > 0.0));
            for (k, iv) in a.intervals.iter().enumerate() {
                assert!(iv[0] <= a.theta[k] && a.theta[k] <= iv[1], "{e}/{m}");
            }
        }
    }
}

#[test]
fn imputation_and_weighting_use_more_subjects_than_complete_cases() {
    let (ds, dgp) = small_mar();
    let cfg = config(&dgp);
    let cca = run(&ds, Estimand::Cace3sls, MissingMethod::Cca, &cfg).unwrap();
    let mi = run(&ds, Estimand::Cace3sls, MissingMethod::Mi, &cfg).unwrap();
    assert!(cca.nobs < ds.len());
    assert_eq!(mi.nobs, ds.len());
    assert!(mi.mi.as_ref().unwrap().imputed.iter().sum::<usize>() > 0);
    let ipw = run(&ds, Estimand::Cace3sls, MissingMethod::Ipw, &cfg).unwrap();
    let summary = ipw.ipw.as_ref().unwrap();
    assert!(summary.mean_weight >= 1.0);
    assert!(summary.max_weight >= summary.mean_weight);
}

#[test]
fn kernels_run_in_single_precision() {
    let cfg = DgpConfig {
        n: 400,
        seed: 5,
        ..DgpConfig::reference()
    };
    let (ds, _) = generate_trial(&cfg).unwrap();
    let conv = |v: &[Option<f64>]| v.iter().map(|x| x.map(|x| x as f32)).collect::<Vec<_>>();
    let single: TrialDataset<f32> = TrialDataset::new(
        ds.z().to_vec(),
        ds.d().to_vec(),
        conv(ds.y1()),
        conv(ds.y2()),
        conv(ds.eq5d0()),
        Default::default(),
    )
    .unwrap();
    let opts = IvOptions {
        covariance: CovarianceKind::Classical,
        ..Default::default()
    };
    let f = tsls(&single, Outcome::Qaly, &[], None, opts)
        .unwrap()
        .fit
        .coefficients[1];
    let y: Vec<f64> = ds.y2().iter().map(|v| v.unwrap()).collect();
    let w = wald_cace(ds.z(), ds.d(), &y).unwrap();
    assert!((f as f64 - w).abs() < 1e-4, "f32 {f} vs f64 {w}");
}
