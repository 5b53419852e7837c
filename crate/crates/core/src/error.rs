use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error at data row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("design matrix is rank deficient; dependent columns: {}", columns.join(", "))]
    Singular { columns: Vec<String> },

    #[error(
        "estimated residual covariance is singular or not positive definite; \
         fall back to equation-wise OLS"
    )]
    SingularResidualCovariance,

    #[error("logistic regression failed: {0}")]
    Separation(String),

    #[error("logistic regression did not converge after {iterations} iterations (max |score| = {score:e})")]
    NoConvergence { iterations: usize, score: f64 },

    #[error(
        "instrument is irrelevant: E(D|Z=1) - E(D|Z=0) = {difference}; \
         assignment must predict treatment received"
    )]
    IrrelevantInstrument { difference: f64 },

    #[error("no observations available: {0}")]
    EmptySample(String),

    #[error("incremental QALY is zero; the ICER is undefined, report the INB instead")]
    UndefinedIcer,

    #[error("negative INB variance {variance:e} from covariance {covariance:?}")]
    NegativeVariance {
        variance: f64,
        covariance: [[f64; 2]; 2],
    },

    #[error("positivity violated: fitted observation probability is zero for complete case {row}")]
    Positivity { row: usize },

    #[error("stratum z={arm}: only {available} observed donors for '{variable}', fewer than k={k}; use a smaller k")]
    TooFewDonors {
        arm: u8,
        variable: String,
        available: usize,
        k: usize,
    },

    #[error("MCMC did not converge: max split-Rhat {max_rhat:.4} for '{parameter}'")]
    NotConverged {
        parameter: String,
        max_rhat: f64,
        draws: Box<crate::bayes::PosteriorDraws>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
