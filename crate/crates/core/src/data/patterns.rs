use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{TrialDataset, Variable};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Order in which follow-up variables drop out. Monotone missingness means a
/// subject missing the k-th variable is missing every later one too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Variable>", into = "Vec<Variable>")]
pub struct Cascade([Variable; 3]);

impl Default for Cascade {
    /// Baseline utility, then cost, then QALYs.
    fn default() -> Self {
        Cascade([Variable::Eq5d0, Variable::Cost, Variable::Qaly])
    }
}

impl Cascade {
    pub fn new(order: [Variable; 3]) -> Result<Self> {
        let mut seen = order.to_vec();
        seen.sort();
        seen.dedup();
        if seen.len() != 3 {
            return Err(Error::Config(format!(
                "cascade must list eq5d0, cost and qaly once each, got {order:?}"
            )));
        }
        Ok(Cascade(order))
    }

    pub fn parse(s: &str) -> Result<Self> {
        let vars = s
            .split(',')
            .map(Variable::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::try_from(vars)
    }

    pub fn order(&self) -> [Variable; 3] {
        self.0
    }

    pub fn position(&self, var: Variable) -> usize {
        self.0
            .iter()
            .position(|&v| v == var)
            .expect("cascade is a permutation")
    }

    /// Variables strictly earlier than `var` in the cascade.
    pub fn before(&self, var: Variable) -> &[Variable] {
        &self.0[..self.position(var)]
    }

    fn is_monotone(&self, r: [bool; 3]) -> bool {
        // r indexed by Variable::ALL order
        let at = |k: usize| r[var_index(self.0[k])];
        (0..2).all(|k| at(k) || !at(k + 1))
    }
}

impl TryFrom<Vec<Variable>> for Cascade {
    type Error = Error;
    fn try_from(v: Vec<Variable>) -> Result<Self> {
        let arr: [Variable; 3] = v.try_into().map_err(|v: Vec<Variable>| {
            Error::Config(format!("cascade needs 3 variables, got {}", v.len()))
        })?;
        Cascade::new(arr)
    }
}

impl From<Cascade> for Vec<Variable> {
    fn from(c: Cascade) -> Self {
        c.0.to_vec()
    }
}

fn var_index(v: Variable) -> usize {
    match v {
        Variable::Eq5d0 => 0,
        Variable::Cost => 1,
        Variable::Qaly => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternCount {
    pub r0: bool,
    pub r1: bool,
    pub r2: bool,
    pub count: usize,
}

/// Counts of each observed `(r0, r1, r2)` pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingPatternSummary {
    pub patterns: Vec<PatternCount>,
    pub monotone: bool,
    pub cascade: Cascade,
}

impl MissingPatternSummary {
    pub fn total(&self) -> usize {
        self.patterns.iter().map(|p| p.count).sum()
    }

    pub fn count(&self, r0: bool, r1: bool, r2: bool) -> usize {
        self.patterns
            .iter()
            .find(|p| (p.r0, p.r1, p.r2) == (r0, r1, r2))
            .map_or(0, |p| p.count)
    }
}

fn rows_patterns<T: Scalar>(ds: &TrialDataset<T>) -> Vec<[bool; 3]> {
    let (r0, r1, r2) = (ds.r0(), ds.r1(), ds.r2());
    (0..ds.len()).map(|i| [r0[i], r1[i], r2[i]]).collect()
}

/// Pattern counts under the default cascade (eq5d0, cost, QALY).
pub fn summarize_patterns<T: Scalar>(ds: &TrialDataset<T>) -> MissingPatternSummary {
    summarize_patterns_with(ds, Cascade::default())
}

pub fn summarize_patterns_with<T: Scalar>(
    ds: &TrialDataset<T>,
    cascade: Cascade,
) -> MissingPatternSummary {
    let mut counts: BTreeMap<[bool; 3], usize> = BTreeMap::new();
    let mut monotone = true;
    for r in rows_patterns(ds) {
        *counts.entry(r).or_default() += 1;
        monotone &= cascade.is_monotone(r);
    }
    // most complete patterns first
    let mut patterns: Vec<PatternCount> = counts
        .into_iter()
        .map(|(r, count)| PatternCount {
            r0: r[0],
            r1: r[1],
            r2: r[2],
            count,
        })
        .collect();
    patterns.reverse();
    MissingPatternSummary {
        patterns,
        monotone,
        cascade,
    }
}

#[derive(Debug, Clone)]
pub struct MonotoneOutcome<T = f64> {
    /// May be empty when every subject violates the cascade.
    pub dataset: TrialDataset<T>,
    pub dropped: usize,
    /// Indices (in the input) of dropped subjects.
    pub dropped_rows: Vec<usize>,
    pub warning: Option<String>,
}

/// Drop subjects whose pattern breaks the default cascade.
pub fn enforce_monotone<T: Scalar>(ds: &TrialDataset<T>) -> MonotoneOutcome<T> {
    enforce_monotone_with(ds, Cascade::default())
}

pub fn enforce_monotone_with<T: Scalar>(
    ds: &TrialDataset<T>,
    cascade: Cascade,
) -> MonotoneOutcome<T> {
    let mut keep = Vec::with_capacity(ds.len());
    let mut dropped_rows = Vec::new();
    for (i, r) in rows_patterns(ds).into_iter().enumerate() {
        if cascade.is_monotone(r) {
            keep.push(i);
        } else {
            dropped_rows.push(i);
        }
    }
    let dataset = ds.subset(&keep);
    let warning = if dataset.is_empty() && !ds.is_empty() {
        let msg = format!(
            "all {} subjects violate the monotone cascade; dataset is empty",
            ds.len()
        );
        log::warn!("{msg}");
        Some(msg)
    } else {
        None
    };
    MonotoneOutcome {
        dataset,
        dropped: dropped_rows.len(),
        dropped_rows,
        warning,
    }
}
