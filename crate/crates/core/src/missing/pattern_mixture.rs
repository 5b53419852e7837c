use serde::{Deserialize, Serialize};

use super::mi::{var_slot, ImputationSet};
use crate::data::Variable;
use crate::error::Result;

/// Offsets added to imputed cells, per variable and randomised arm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    /// `values[variable][arm]`, variables ordered like [`Variable::ALL`].
    pub values: [[f64; 2]; 3],
}

impl Deltas {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn with(mut self, var: Variable, arm: bool, delta: f64) -> Self {
        self.values[var_slot(var)][arm as usize] = delta;
        self
    }

    pub fn get(&self, var: Variable, arm: bool) -> f64 {
        self.values[var_slot(var)][arm as usize]
    }
}

/// Shift every imputed cell by its variable/arm offset. Observed cells are
/// never changed; a zero offset leaves cells bit-identical.
///
/// Returns the shifted set and warnings for offsets that touch no imputed cell.
pub fn pattern_mixture_offset(
    imp: &ImputationSet,
    deltas: &Deltas,
) -> Result<(ImputationSet, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut out = imp.clone();
    let Some(first) = imp.datasets.first() else {
        return Ok((out, warnings));
    };
    let z = first.z().to_vec();
    for var in Variable::ALL {
        for arm in [false, true] {
            let delta = deltas.get(var, arm);
            if delta == 0.0 {
                continue;
            }
            let rows: Vec<usize> = imp
                .imputed_rows(var)
                .iter()
                .copied()
                .filter(|&i| z[i] == arm)
                .collect();
            if rows.is_empty() {
                let w = format!(
                    "offset {delta} for '{}' in arm z={} has no imputed cells to shift",
                    var.name(),
                    arm as u8
                );
                log::warn!("{w}");
                warnings.push(w);
                continue;
            }
            for ds in out.datasets.iter_mut() {
                let mut vals = ds.values(var).to_vec();
                for &i in &rows {
                    vals[i] = vals[i].map(|v| v + delta);
                }
                *ds = ds.with_values(var, vals)?;
            }
        }
    }
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrialDataset;
    use crate::missing::MiConfig;
    use indexmap::IndexMap;

    fn set() -> ImputationSet {
        let ds = TrialDataset::new(
            vec![true, true, false, false],
            vec![true, true, false, false],
            vec![Some(1.0); 4],
            vec![Some(0.5), Some(0.6), Some(0.7), Some(0.8)],
            vec![Some(0.1); 4],
            IndexMap::new(),
        )
        .unwrap();
        ImputationSet {
            datasets: vec![ds.clone(), ds],
            imputed: [vec![], vec![], vec![1, 2]],
            config: MiConfig::default(),
        }
    }

    #[test]
    fn zero_offsets_are_identity() {
        let s = set();
        let (out, w) = pattern_mixture_offset(&s, &Deltas::zero()).unwrap();
        assert_eq!(out.datasets, s.datasets);
        assert!(w.is_empty());
    }

    #[test]
    fn only_imputed_cells_in_arm_shift() {
        let s = set();
        let d = Deltas::zero().with(Variable::Qaly, true, -0.05);
        let (out, _) = pattern_mixture_offset(&s, &d).unwrap();
        let y = out.datasets[0].y2();
        assert_eq!(y[0], Some(0.5));
        assert_eq!(y[1], Some(0.6 - 0.05));
        assert_eq!(y[2], Some(0.7));
    }

    #[test]
    fn offset_without_imputed_cells_warns() {
        let d = Deltas::zero().with(Variable::Cost, false, 10.0);
        let (out, w) = pattern_mixture_offset(&set(), &d).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(out.datasets, set().datasets);
    }
}
