use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Cascade, TrialDataset, Variable};
use crate::error::{Error, Result};
use crate::iv::build_design;
use crate::linreg::{logistic, FitResult, LogisticOptions};

/// Candidate regressors for the observation model of each cascade stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PomSpec {
    /// Candidates indexed by cascade position.
    pub candidates: [Vec<String>; 3],
    /// Regressors are eliminated while any p-value reaches this threshold.
    pub threshold: f64,
    pub cascade: Cascade,
}

impl PomSpec {
    /// Arm, receipt and every extra covariate for each stage, plus the
    /// variables observed earlier in the cascade.
    pub fn default_for(ds: &TrialDataset<f64>, cascade: Cascade) -> Self {
        let base: Vec<String> = ["z", "d"]
            .into_iter()
            .map(String::from)
            .chain(ds.covariates().keys().cloned())
            .collect();
        let candidates = std::array::from_fn(|stage| {
            let mut c = base.clone();
            c.extend(
                cascade.order()[..stage]
                    .iter()
                    .map(|v| v.name().to_string()),
            );
            c
        });
        Self {
            candidates,
            threshold: 0.1,
            cascade,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "selection threshold {} outside (0, 1]",
                self.threshold
            )));
        }
        for (stage, cands) in self.candidates.iter().enumerate() {
            let target = self.cascade.order()[stage];
            for c in cands {
                if let Ok(v) = Variable::parse(c) {
                    if self.cascade.position(v) >= stage {
                        return Err(Error::Config(format!(
                            "'{c}' is not observed before '{}' in the cascade and cannot predict it",
                            target.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Observation model for one cascade stage.
#[derive(Debug, Clone)]
pub struct FittedPom {
    pub target: Variable,
    /// Rows still under observation at this stage.
    pub at_risk: Vec<usize>,
    /// Regressors surviving backward elimination.
    pub selected: Vec<String>,
    /// `None` when every at-risk subject is observed (probability 1).
    pub fit: Option<FitResult<f64>>,
    /// Fitted observation probability for each at-risk row.
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PomModels {
    pub cascade: Cascade,
    pub models: Vec<FittedPom>,
    pub n: usize,
}

impl PomModels {
    /// Product of observation probabilities along the cascade for every
    /// subject observed at all stages; `None` for incomplete subjects.
    pub fn completion_probabilities(&self) -> Vec<Option<f64>> {
        let mut prod: Vec<Option<f64>> = vec![Some(1.0); self.n];
        let mut reached = vec![0usize; self.n];
        for m in &self.models {
            for (&i, &p) in m.at_risk.iter().zip(&m.probabilities) {
                if let Some(v) = prod[i].as_mut() {
                    *v *= p;
                }
                reached[i] += 1;
            }
        }
        let last = self.models.last().expect("three stages");
        let mut complete = vec![false; self.n];
        for &i in &last.at_risk {
            complete[i] = true;
        }
        (0..self.n)
            .map(|i| {
                if complete[i] && reached[i] == self.models.len() {
                    prod[i]
                } else {
                    None
                }
            })
            .collect()
    }
}

impl PomModels {
    /// Logistic score contributions `(r - pi) x` of every fitted stage, one
    /// row per subject and one column per coefficient; subjects not at risk
    /// in a stage contribute zero.
    pub fn scores(&self, ds: &TrialDataset<f64>) -> Result<DMatrix<f64>> {
        if ds.len() != self.n {
            return Err(Error::Dimension(format!(
                "{} subjects, models fitted on {}",
                ds.len(),
                self.n
            )));
        }
        let mut blocks = Vec::new();
        for m in &self.models {
            if m.fit.is_none() {
                continue;
            }
            let names: Vec<&str> = m.selected.iter().map(String::as_str).collect();
            let design = build_design(ds, &m.at_risk, &names)?;
            let observed = ds.indicator(m.target);
            let mut b = DMatrix::zeros(self.n, design.ncols());
            for (k, &i) in m.at_risk.iter().enumerate() {
                let r = if observed[i] { 1.0 } else { 0.0 };
                for j in 0..design.ncols() {
                    b[(i, j)] = (r - m.probabilities[k]) * design.matrix[(k, j)];
                }
            }
            blocks.push(b);
        }
        let cols = blocks.iter().map(|b| b.ncols()).sum();
        let mut out = DMatrix::zeros(self.n, cols);
        let mut c0 = 0;
        for b in blocks {
            out.view_mut((0, c0), (self.n, b.ncols())).copy_from(&b);
            c0 += b.ncols();
        }
        Ok(out)
    }
}

fn separation_context(e: Error, target: Variable) -> Error {
    match e {
        Error::Separation(m) => Error::Separation(format!(
            "{m}; the observation model for '{}' predicts missingness perfectly, so some \
             observation probabilities are zero and inverse weighting is not possible",
            target.name()
        )),
        other => other,
    }
}

/// Fit one logistic observation model per cascade stage on its at-risk
/// subset, with backward elimination of the regressor with the largest Wald
/// p-value until all fall below the threshold.
pub fn fit_pom(ds: &TrialDataset<f64>, spec: &PomSpec) -> Result<PomModels> {
    spec.validate()?;
    if !crate::data::summarize_patterns_with(ds, spec.cascade).monotone {
        return Err(Error::InvalidInput(
            "missingness is not monotone in the cascade order; enforce monotonicity first".into(),
        ));
    }
    let order = spec.cascade.order();
    let mut at_risk: Vec<usize> = (0..ds.len()).collect();
    let mut models = Vec::with_capacity(3);
    for (stage, &target) in order.iter().enumerate() {
        let observed = ds.indicator(target);
        let y: Vec<bool> = at_risk.iter().map(|&i| observed[i]).collect();
        let n_obs = y.iter().filter(|&&v| v).count();
        let model = if n_obs == y.len() {
            FittedPom {
                target,
                at_risk: at_risk.clone(),
                selected: vec![],
                fit: None,
                probabilities: vec![1.0; y.len()],
            }
        } else {
            let names: Vec<&str> = spec.candidates[stage].iter().map(String::as_str).collect();
            for &c in &names {
                let col = ds.column(c)?;
                if let Some(&i) = at_risk.iter().find(|&&i| col[i].is_none()) {
                    return Err(Error::InvalidInput(format!(
                        "candidate '{c}' for the '{}' observation model is missing in row {}",
                        target.name(),
                        i + 1
                    )));
                }
            }
            let (fit, selected) = backward_select(ds, &at_risk, &y, names, spec.threshold)
                .map_err(|e| separation_context(e, target))?;
            FittedPom {
                target,
                at_risk: at_risk.clone(),
                selected,
                probabilities: fit.fitted.iter().copied().collect(),
                fit: Some(fit),
            }
        };
        models.push(model);
        at_risk.retain(|&i| observed[i]);
    }
    Ok(PomModels {
        cascade: spec.cascade,
        models,
        n: ds.len(),
    })
}

fn backward_select(
    ds: &TrialDataset<f64>,
    rows: &[usize],
    y: &[bool],
    mut names: Vec<&str>,
    threshold: f64,
) -> Result<(FitResult<f64>, Vec<String>)> {
    loop {
        let design = build_design(ds, rows, &names)?;
        let fit = match logistic(&design, y, LogisticOptions::default()) {
            Ok(f) => f,
            Err(Error::Singular { columns })
                if !columns.iter().any(|c| c == crate::iv::INTERCEPT) =>
            {
                log::debug!("dropping collinear observation-model regressors {columns:?}");
                names.retain(|n| !columns.iter().any(|c| c == n));
                continue;
            }
            Err(e) => return Err(e),
        };
        // position 0 is the intercept, which is never eliminated
        let worst = (1..fit.coefficients.len())
            .map(|j| (j, fit.p_value(j)))
            .map(|(j, p)| (j, if p.is_nan() { f64::INFINITY } else { p }))
            .filter(|&(_, p)| p >= threshold)
            .fold(None, |acc: Option<(usize, f64)>, (j, p)| match acc {
                Some((_, bp)) if bp >= p => acc,
                _ => Some((j, p)),
            });
        match worst {
            Some((j, _)) => {
                names.remove(j - 1);
            }
            None => return Ok((fit, names.iter().map(|s| s.to_string()).collect())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;
    use rand::{Rng, SeedableRng};

    fn dataset(n: usize, seed: u64, r2_on_eq5d0: bool) -> TrialDataset<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut z = vec![];
        let mut e = vec![];
        let mut y1 = vec![];
        let mut y2 = vec![];
        let mut age = vec![];
        for _ in 0..n {
            let zi = rng.random_bool(0.5);
            let ei: f64 = rng.random_range(0.0..1.0);
            z.push(zi);
            e.push(Some(ei));
            age.push(Some(rng.random_range(20.0..80.0)));
            y1.push(Some(rng.random_range(0.0..1000.0)));
            let p = if r2_on_eq5d0 {
                1.0 / (1.0 + (-(3.0 * ei - 1.0f64)).exp())
            } else {
                0.7
            };
            y2.push(rng.random_bool(p).then(|| rng.random_range(0.0..1.0)));
        }
        let mut cov = IndexMap::new();
        cov.insert("age".to_string(), age);
        TrialDataset::new(z.clone(), z, y1, y2, e, cov).unwrap()
    }

    #[test]
    fn default_candidates_respect_cascade() {
        let ds = dataset(10, 1, false);
        let spec = PomSpec::default_for(&ds, Cascade::default());
        assert_eq!(spec.candidates[0], ["z", "d", "age"]);
        assert_eq!(spec.candidates[2], ["z", "d", "age", "eq5d0", "y1"]);
        spec.validate().unwrap();
        let mut bad = spec.clone();
        bad.candidates[1].push("y2".into());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn complete_stages_have_unit_probability() {
        let ds = dataset(200, 2, false);
        let m = fit_pom(&ds, &PomSpec::default_for(&ds, Cascade::default())).unwrap();
        assert!(m.models[0].fit.is_none() && m.models[1].fit.is_none());
        assert!(m.models[2]
            .probabilities
            .iter()
            .all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn r2_model_selects_eq5d0() {
        let ds = dataset(5000, 3, true);
        let m = fit_pom(&ds, &PomSpec::default_for(&ds, Cascade::default())).unwrap();
        assert!(m.models[2].selected.contains(&"eq5d0".to_string()));
        assert!(!m.models[2].selected.contains(&"y1".to_string()));
    }

    #[test]
    fn independent_missingness_reduces_to_intercept() {
        let ds = dataset(400, 4, false);
        let mut spec = PomSpec::default_for(&ds, Cascade::default());
        // a strict threshold keeps chance selections rare
        spec.threshold = 0.01;
        let m = fit_pom(&ds, &spec).unwrap();
        assert!(
            m.models[2].selected.is_empty(),
            "{:?}",
            m.models[2].selected
        );
        let p = m.models[2].probabilities[0];
        assert!(m.models[2]
            .probabilities
            .iter()
            .all(|&q| (q - p).abs() < 1e-12));
    }
}
