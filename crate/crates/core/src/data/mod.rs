//! Trial dataset representation, CSV ingestion and missingness accounting.

mod csv_io;
mod patterns;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use csv_io::{load_csv, read_csv, write_csv, Schema};
pub use patterns::{
    enforce_monotone, enforce_monotone_with, summarize_patterns, summarize_patterns_with, Cascade,
    MissingPatternSummary, MonotoneOutcome, PatternCount,
};

/// Logical name of the baseline utility covariate.
pub const EQ5D0: &str = "eq5d0";

/// The three partially observed analysis variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Eq5d0,
    Cost,
    Qaly,
}

impl Variable {
    pub const ALL: [Variable; 3] = [Variable::Eq5d0, Variable::Cost, Variable::Qaly];

    pub fn name(self) -> &'static str {
        match self {
            Variable::Eq5d0 => EQ5D0,
            Variable::Cost => "y1",
            Variable::Qaly => "y2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "eq5d0" => Ok(Variable::Eq5d0),
            "y1" | "cost" => Ok(Variable::Cost),
            "y2" | "qaly" => Ok(Variable::Qaly),
            other => Err(Error::InvalidInput(format!(
                "unknown analysis variable '{other}'"
            ))),
        }
    }
}

/// Continuous outcome selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Cost,
    Qaly,
}

impl Outcome {
    pub fn variable(self) -> Variable {
        match self {
            Outcome::Cost => Variable::Cost,
            Outcome::Qaly => Variable::Qaly,
        }
    }
}

/// Per-participant trial records.
///
/// `z` and `d` are always observed. Every other column is `Option`, and the
/// observation indicators `r0`, `r1`, `r2` are derived from presence, so they
/// cannot drift out of sync with the values.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset<T = f64> {
    z: Vec<bool>,
    d: Vec<bool>,
    y1: Vec<Option<T>>,
    y2: Vec<Option<T>>,
    eq5d0: Vec<Option<T>>,
    covariates: IndexMap<String, Vec<Option<T>>>,
}

impl<T: Scalar> TrialDataset<T> {
    /// Build a dataset from columns. `covariates` must not repeat a reserved name.
    pub fn new(
        z: Vec<bool>,
        d: Vec<bool>,
        y1: Vec<Option<T>>,
        y2: Vec<Option<T>>,
        eq5d0: Vec<Option<T>>,
        covariates: IndexMap<String, Vec<Option<T>>>,
    ) -> Result<Self> {
        let n = z.len();
        let lens = [d.len(), y1.len(), y2.len(), eq5d0.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Dimension(format!(
                "column lengths differ: z={n}, d/y1/y2/eq5d0={lens:?}"
            )));
        }
        for (name, col) in &covariates {
            if is_reserved(name) {
                return Err(Error::Schema(format!(
                    "covariate name '{name}' is reserved"
                )));
            }
            if col.len() != n {
                return Err(Error::Dimension(format!(
                    "covariate '{name}' has {} rows, expected {n}",
                    col.len()
                )));
            }
        }
        Ok(Self {
            z,
            d,
            y1,
            y2,
            eq5d0,
            covariates,
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn z(&self) -> &[bool] {
        &self.z
    }

    pub fn d(&self) -> &[bool] {
        &self.d
    }

    pub fn y1(&self) -> &[Option<T>] {
        &self.y1
    }

    pub fn y2(&self) -> &[Option<T>] {
        &self.y2
    }

    pub fn eq5d0(&self) -> &[Option<T>] {
        &self.eq5d0
    }

    pub fn values(&self, var: Variable) -> &[Option<T>] {
        match var {
            Variable::Eq5d0 => &self.eq5d0,
            Variable::Cost => &self.y1,
            Variable::Qaly => &self.y2,
        }
    }

    pub fn outcome(&self, outcome: Outcome) -> &[Option<T>] {
        self.values(outcome.variable())
    }

    /// Observation indicator (`true` = observed) for one analysis variable.
    pub fn indicator(&self, var: Variable) -> Vec<bool> {
        self.values(var).iter().map(Option::is_some).collect()
    }

    pub fn r0(&self) -> Vec<bool> {
        self.indicator(Variable::Eq5d0)
    }

    pub fn r1(&self) -> Vec<bool> {
        self.indicator(Variable::Cost)
    }

    pub fn r2(&self) -> Vec<bool> {
        self.indicator(Variable::Qaly)
    }

    /// Additional named covariates (eq5d0 excluded), in load order.
    pub fn covariates(&self) -> &IndexMap<String, Vec<Option<T>>> {
        &self.covariates
    }

    /// Names of every covariate including `eq5d0`.
    pub fn covariate_names(&self) -> Vec<String> {
        std::iter::once(EQ5D0.to_string())
            .chain(self.covariates.keys().cloned())
            .collect()
    }

    /// Look up any column by logical name: `z`, `d`, `y1`/`cost`, `y2`/`qaly`,
    /// `eq5d0`, or an extra covariate.
    pub fn column(&self, name: &str) -> Result<Vec<Option<T>>> {
        let b = |v: &[bool]| {
            v.iter()
                .map(|&x| Some(if x { T::one() } else { T::zero() }))
                .collect()
        };
        match name {
            "z" => Ok(b(&self.z)),
            "d" => Ok(b(&self.d)),
            "y1" | "cost" => Ok(self.y1.clone()),
            "y2" | "qaly" => Ok(self.y2.clone()),
            EQ5D0 => Ok(self.eq5d0.clone()),
            other => self
                .covariates
                .get(other)
                .cloned()
                .ok_or_else(|| Error::Schema(format!("unknown column '{other}'"))),
        }
    }

    /// Row indices where every named column is observed.
    pub fn complete_rows(&self, names: &[&str]) -> Result<Vec<usize>> {
        let cols = names
            .iter()
            .map(|n| self.column(n))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..self.len())
            .filter(|&i| cols.iter().all(|c| c[i].is_some()))
            .collect())
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let pick_b = |v: &[bool]| rows.iter().map(|&i| v[i]).collect();
        let pick = |v: &[Option<T>]| rows.iter().map(|&i| v[i]).collect();
        Self {
            z: pick_b(&self.z),
            d: pick_b(&self.d),
            y1: pick(&self.y1),
            y2: pick(&self.y2),
            eq5d0: pick(&self.eq5d0),
            covariates: self
                .covariates
                .iter()
                .map(|(k, v)| (k.clone(), pick(v)))
                .collect(),
        }
    }

    /// Copy with one analysis variable replaced.
    pub fn with_values(&self, var: Variable, values: Vec<Option<T>>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::Dimension(format!(
                "replacement for {} has {} rows, expected {}",
                var.name(),
                values.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        match var {
            Variable::Eq5d0 => out.eq5d0 = values,
            Variable::Cost => out.y1 = values,
            Variable::Qaly => out.y2 = values,
        }
        Ok(out)
    }

    /// Copy with an extra covariate column appended (or replaced).
    pub fn with_covariate(&self, name: &str, values: Vec<Option<T>>) -> Result<Self> {
        if is_reserved(name) {
            return Err(Error::Schema(format!(
                "covariate name '{name}' is reserved"
            )));
        }
        if values.len() != self.len() {
            return Err(Error::Dimension(format!(
                "covariate '{name}' has {} rows, expected {}",
                values.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        out.covariates.insert(name.to_string(), values);
        Ok(out)
    }

    /// Sample mean of `d` within each arm: `(E[D|Z=0], E[D|Z=1])`.
    pub fn compliance_by_arm(&self) -> (f64, f64) {
        let mut s = [0.0f64; 2];
        let mut c = [0usize; 2];
        for (&z, &d) in self.z.iter().zip(&self.d) {
            let a = z as usize;
            c[a] += 1;
            if d {
                s[a] += 1.0;
            }
        }
        (s[0] / c[0].max(1) as f64, s[1] / c[1].max(1) as f64)
    }
}

pub(crate) fn is_reserved(name: &str) -> bool {
    matches!(name, "z" | "d" | "y1" | "y2" | "cost" | "qaly" | EQ5D0)
}
