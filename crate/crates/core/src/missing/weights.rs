use serde::{Deserialize, Serialize};

use super::pom::PomModels;
use crate::cea::{quantile_sorted, sorted};
use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::iv::CaceEstimate;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightOptions {
    /// Cap weights at this quantile of the complete-case weights (e.g. 0.99).
    pub truncate_quantile: Option<f64>,
    /// Multiply by the complete-case proportion so weights average near 1.
    pub stabilize: bool,
}

/// Inverse-probability weights, zero for incomplete subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub stabilized: bool,
    pub truncate_quantile: Option<f64>,
    /// Number of weights reduced by truncation.
    pub truncated: usize,
    pub max: f64,
    /// Mean over complete cases.
    pub mean: f64,
}

/// Ratio of maximum to mean weight above which a warning is logged.
const UNSTABLE_RATIO: f64 = 10.0;

/// `w_i = 1 / (pi_0i pi_1i pi_2i)` for complete cases.
pub fn ipw_weights(models: &PomModels, opts: WeightOptions) -> Result<WeightVector> {
    let probs = models.completion_probabilities();
    let n_complete = probs.iter().flatten().count();
    if n_complete == 0 {
        return Err(Error::EmptySample("no complete cases to weight".into()));
    }
    let scale = if opts.stabilize {
        n_complete as f64 / models.n as f64
    } else {
        1.0
    };
    let mut weights = vec![0.0; models.n];
    for (i, p) in probs.iter().enumerate() {
        if let Some(p) = *p {
            if !(p > 0.0) {
                return Err(Error::Positivity { row: i + 1 });
            }
            weights[i] = scale / p;
        }
    }
    let mut truncated = 0;
    if let Some(q) = opts.truncate_quantile {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::Config(format!(
                "truncation quantile {q} outside (0, 1]"
            )));
        }
        let positive: Vec<f64> = weights.iter().copied().filter(|&w| w > 0.0).collect();
        let cap = quantile_sorted(&sorted(&positive), q);
        for w in weights.iter_mut().filter(|w| **w > cap) {
            *w = cap;
            truncated += 1;
        }
        if truncated > 0 {
            log::info!("truncated {truncated} weights at {cap:.4} (quantile {q})");
        }
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    let mean = weights.iter().sum::<f64>() / n_complete as f64;
    if max > UNSTABLE_RATIO * mean {
        log::warn!(
            "unstable weights: max {max:.3} is more than {UNSTABLE_RATIO} times the mean {mean:.3}"
        );
    }
    Ok(WeightVector {
        weights,
        stabilized: opts.stabilize,
        truncate_quantile: opts.truncate_quantile,
        truncated,
        max,
        mean,
    })
}


/// Robust covariance of an inverse-weighted estimate that accounts for the
/// observation models having been estimated: the estimating-function
/// contributions are residualized on the observation-model scores. `ds` must
/// be the dataset the models were fitted on.
pub fn adjust_for_estimated_weights(
    est: &mut CaceEstimate<f64>,
    models: &PomModels,
    ds: &TrialDataset<f64>,
) -> Result<()> {
    let aux = models.scores(ds)?;
    let cov = est.system.projected_covariance(&est.rows, &aux)?;
    est.set_system_covariance(cov);
    Ok(())
}
