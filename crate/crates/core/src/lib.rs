//! Compliance-adjusted cost-effectiveness analysis for randomised trials.
//!
//! The crate estimates the complier average causal effect (CACE) on a pair of
//! correlated endpoints (total cost and QALYs) when participants depart from
//! their randomised allocation and follow-up data are incomplete. It contains:
//!
//! * [`data`]: trial datasets, CSV ingestion and missingness patterns;
//! * [`linreg`]: OLS, logistic IRLS and FGLS/3SLS system kernels;
//! * [`iv`]: Wald, 2SLS, 3SLS, ITT/PP seemingly unrelated regressions,
//!   2SPS/2SRI for binary outcomes and IPW for non-compliance;
//! * [`bayes`]: the bivariate reduced-form IV model sampled by
//!   Metropolis-within-Gibbs;
//! * [`missing`]: probability-of-missingness models and weights, multiple
//!   imputation with predictive mean matching, Rubin's rules and
//!   pattern-mixture offsets;
//! * [`cea`]: incremental net benefit, ICERs and acceptability curves;
//! * [`sim`]: a principal-strata trial simulator with known ground truth;
//! * [`mc`]: the Monte Carlo bias/coverage harness;
//! * [`pipeline`]: estimand × missing-data method combinations used by the
//!   command-line tool and the harness.
//!
//! Deterministic kernels are generic over [`Scalar`]; the aliases below fix
//! them to `f64`.

pub mod bayes;
pub mod cea;
pub mod data;
pub mod error;
pub mod iv;
pub mod linreg;
pub mod mc;
pub mod missing;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Trial dataset in double precision.
pub type Dataset = data::TrialDataset<f64>;
pub type Fit = linreg::FitResult<f64>;
pub type System = linreg::SystemEstimate<f64>;
pub type Cace = iv::CaceEstimate<f64>;
pub type Cea = cea::CeaResult<f64>;
pub type Pooled = missing::PooledEstimate<f64>;
