//! Missing-data engines: probability-of-missingness models with inverse
//! probability weights, multiple imputation by chained equations with
//! predictive mean matching, Rubin's rules, and pattern-mixture offsets.

mod mi;
mod pattern_mixture;
mod pom;
pub(crate) mod rubin;
mod weights;

pub use mi::{donor_property_violations, mi_impute, ImputationSet, MiConfig};
pub use pattern_mixture::{pattern_mixture_offset, Deltas};
pub use pom::{fit_pom, FittedPom, PomModels, PomSpec};
pub use rubin::{rubin_pool, rubin_pool_scalar, PooledEstimate};
pub use weights::{adjust_for_estimated_weights, ipw_weights, WeightOptions, WeightVector};
