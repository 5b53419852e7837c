use approx::assert_relative_eq;
use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector, Matrix2};
use proptest::prelude::*;

use cace_core::cea::{inb_moments, CeaResult};
use cace_core::data::{Outcome, TrialDataset, Variable};
use cace_core::iv::{three_sls, tsls, tsls_pair, wald_cace, IvOptions};
use cace_core::linreg::CovarianceKind;
use cace_core::missing::{mi_impute, rubin_pool, MiConfig};
use cace_core::sim::{apply_missingness, generate_trial, DgpConfig, MissingnessConfig};
use cace_core::Dataset;

fn trial(n: usize, seed: u64) -> Dataset {
    let cfg = DgpConfig {
        n,
        seed,
        ..DgpConfig::reference()
    };
    generate_trial(&cfg).unwrap().0
}

fn complete(v: &[Option<f64>]) -> Vec<f64> {
    v.iter().map(|x| x.unwrap()).collect()
}

fn rebuild(ds: &Dataset, y1: Vec<Option<f64>>, y2: Vec<Option<f64>>) -> Dataset {
    TrialDataset::new(
        ds.z().to_vec(),
        ds.d().to_vec(),
        y1,
        y2,
        ds.eq5d0().to_vec(),
        ds.covariates().clone(),
    )
    .unwrap()
}

fn classical() -> IvOptions {
    IvOptions {
        covariance: CovarianceKind::Classical,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tsls_without_covariates_is_wald(seed in any::<u64>(), n in 120usize..400) {
        let ds = trial(n, seed);
        let y = complete(ds.y1());
        let wald = wald_cace(ds.z(), ds.d(), &y).unwrap();
        let fit = tsls(&ds, Outcome::Cost, &[], None, IvOptions::default()).unwrap();
        prop_assert!((fit.fit.coefficients[1] - wald).abs() <= 1e-9 * wald.abs().max(1.0));
    }

    #[test]
    fn wald_is_location_invariant_and_scale_equivariant(
        seed in any::<u64>(),
        shift in -1e4f64..1e4,
        scale in 0.01f64..100.0,
    ) {
        let ds = trial(200, seed);
        let y = complete(ds.y2());
        let base = wald_cace(ds.z(), ds.d(), &y).unwrap();
        let moved: Vec<f64> = y.iter().map(|v| v + shift).collect();
        let scaled: Vec<f64> = y.iter().map(|v| v * scale).collect();
        prop_assert!((wald_cace(ds.z(), ds.d(), &moved).unwrap() - base).abs() < 1e-8);
        let s = wald_cace(ds.z(), ds.d(), &scaled).unwrap();
        prop_assert!((s - scale * base).abs() <= 1e-9 * (scale * base).abs().max(1e-6));
    }

    #[test]
    fn rubin_pool_ignores_imputation_order(
        est in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..12),
        var in prop::collection::vec(0.01f64..5.0, 12),
        rot in 0usize..12,
    ) {
        let m = est.len();
        let ests: Vec<DVector<f64>> = est.iter().map(|&(a, b)| DVector::from_vec(vec![a, b])).collect();
        let covs: Vec<DMatrix<f64>> = (0..m)
            .map(|j| DMatrix::from_row_slice(2, 2, &[var[j], 0.1 * var[j], 0.1 * var[j], 2.0 * var[j]]))
            .collect();
        let k = rot % m;
        let mut e2 = ests.clone();
        let mut c2 = covs.clone();
        e2.rotate_left(k);
        c2.rotate_left(k);
        e2.reverse();
        c2.reverse();
        let a = rubin_pool(&ests, &covs).unwrap();
        let b = rubin_pool(&e2, &c2).unwrap();
        for j in 0..2 {
            prop_assert!((a.estimate[j] - b.estimate[j]).abs() < 1e-12);
            for l in 0..2 {
                prop_assert!((a.total[(j, l)] - b.total[(j, l)]).abs() < 1e-10);
            }
            let t = a.within[(j, j)] + (1.0 + 1.0 / m as f64) * a.between[(j, j)];
            prop_assert!((a.total[(j, j)] - t).abs() < 1e-10);
            prop_assert!(a.between[(j, j)] >= 0.0);
        }
    }

    #[test]
    fn inb_is_linear_in_lambda(
        dc in -5e3f64..5e3,
        dq in -0.5f64..0.5,
        vc in 1.0f64..1e5,
        vq in 1e-5f64..1e-2,
        r in -0.9f64..0.9,
        l1 in 0.0f64..1e5,
        l2 in 0.0f64..1e5,
    ) {
        let c = r * (vc * vq).sqrt();
        let cov = Matrix2::new(vc, c, c, vq);
        let (i1, v1) = inb_moments(dc, dq, &cov, l1).unwrap();
        let (i2, _) = inb_moments(dc, dq, &cov, l2).unwrap();
        let (i0, _) = inb_moments(dc, dq, &cov, 0.0).unwrap();
        prop_assert!((i1 - (l1 * dq - dc)).abs() <= 1e-9 * (l1 * dq).abs().max(dc.abs()).max(1.0));
        prop_assert!(((i2 - i1) - (l2 - l1) * dq).abs() <= 1e-8 * (l1.max(l2) * dq.abs()).max(1.0));
        prop_assert!((i0 + dc).abs() < 1e-12 * dc.abs().max(1.0));
        let v = l1 * l1 * vq + vc - 2.0 * l1 * c;
        prop_assert!((v1 - v).abs() <= 1e-9 * v.abs().max(1.0));
        prop_assert!(v1 >= 0.0);
    }

    #[test]
    fn inb_scales_with_currency(
        dc in -5e3f64..5e3,
        dq in -0.5f64..0.5,
        vc in 1.0f64..1e5,
        vq in 1e-5f64..1e-2,
        lambda in 0.0f64..5e4,
        a in 0.01f64..100.0,
    ) {
        let cov = Matrix2::new(vc, 0.0, 0.0, vq);
        let scaled = Matrix2::new(a * a * vc, 0.0, 0.0, vq);
        let base = CeaResult::from_moments(dc, dq, &cov, lambda, "CACE", "cca").unwrap();
        let s = CeaResult::from_moments(a * dc, dq, &scaled, a * lambda, "CACE", "cca").unwrap();
        prop_assert!((s.inb - a * base.inb).abs() <= 1e-9 * (a * base.inb).abs().max(1.0));
        prop_assert!((s.inb_se - a * base.inb_se).abs() <= 1e-9 * (a * base.inb_se).max(1e-9));
    }

    #[test]
    fn constant_weights_leave_three_sls_unchanged(seed in any::<u64>(), c in 0.01f64..50.0) {
        let ds = trial(250, seed);
        let w = vec![c; ds.len()];
        let a = three_sls(&ds, &["eq5d0"], None, IvOptions::default()).unwrap();
        let b = three_sls(&ds, &["eq5d0"], Some(&w), IvOptions::default()).unwrap();
        prop_assert!((a.theta1 - b.theta1).abs() <= 1e-8 * a.theta1.abs().max(1.0));
        prop_assert!((a.theta2 - b.theta2).abs() <= 1e-8 * a.theta2.abs().max(1e-3));
        for j in 0..2 {
            for l in 0..2 {
                let (x, y) = (a.covariance[(j, l)], b.covariance[(j, l)]);
                prop_assert!((x - y).abs() <= 1e-8 * x.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn swapping_outcomes_swaps_three_sls(seed in any::<u64>()) {
        let ds = trial(250, seed);
        let swapped = rebuild(&ds, ds.y2().to_vec(), ds.y1().to_vec());
        let a = three_sls(&ds, &["eq5d0"], None, classical()).unwrap();
        let b = three_sls(&swapped, &["eq5d0"], None, classical()).unwrap();
        prop_assert!((a.theta1 - b.theta2).abs() <= 1e-8 * a.theta1.abs().max(1.0));
        prop_assert!((a.theta2 - b.theta1).abs() <= 1e-8 * a.theta2.abs().max(1e-3));
        prop_assert!((a.covariance[(0, 0)] - b.covariance[(1, 1)]).abs() <= 1e-8 * a.covariance[(0, 0)]);
        prop_assert!((a.covariance[(0, 1)] - b.covariance[(1, 0)]).abs() <= 1e-8 * a.covariance[(0, 1)].abs().max(1e-12));
    }

    #[test]
    fn just_identified_three_sls_matches_two_sls(seed in any::<u64>()) {
        let ds = trial(250, seed);
        let a = three_sls(&ds, &["eq5d0", "age"], None, IvOptions::default()).unwrap();
        let b = tsls_pair(&ds, &["eq5d0", "age"], None, IvOptions::default()).unwrap();
        prop_assert!((a.theta1 - b.theta1).abs() <= 1e-8 * a.theta1.abs().max(1.0));
        prop_assert!((a.theta2 - b.theta2).abs() <= 1e-8 * a.theta2.abs().max(1e-3));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn imputation_keeps_observed_cells(seed in any::<u64>(), rate in 0.05f64..0.4) {
        let ds = trial(160, seed);
        let ds = apply_missingness(&ds, &MissingnessConfig::mcar(rate), seed).unwrap();
        let cfg = MiConfig { m: 3, k: 5, cycles: 2, seed, predictors: None };
        let imp = mi_impute(&ds, &cfg).unwrap();
        for var in Variable::ALL {
            let orig = ds.values(var);
            let rows = imp.imputed_rows(var);
            for d in &imp.datasets {
                let vals = d.values(var);
                for (i, o) in orig.iter().enumerate() {
                    match o {
                        Some(x) => prop_assert_eq!(vals[i].unwrap().to_bits(), x.to_bits()),
                        None => {
                            prop_assert!(rows.contains(&i));
                            prop_assert!(vals[i].is_some());
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn perfect_compliance_makes_cace_equal_itt() {
    let ds = trial(300, 11);
    let z = ds.z().to_vec();
    let ds = TrialDataset::new(
        z.clone(),
        z,
        ds.y1().to_vec(),
        ds.y2().to_vec(),
        ds.eq5d0().to_vec(),
        IndexMap::new(),
    )
    .unwrap();
    let c = three_sls(&ds, &[], None, IvOptions::default()).unwrap();
    let i = cace_core::iv::itt_sur(&ds, &[], None, IvOptions::default()).unwrap();
    assert_relative_eq!(c.theta1, i.theta1, max_relative = 1e-9);
    assert_relative_eq!(c.theta2, i.theta2, max_relative = 1e-9);
}
