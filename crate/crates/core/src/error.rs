use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("offspring law has zero mean")]
    DegenerateMean,

    #[error("environment moment {0} is not finite")]
    NonFiniteMoment(&'static str),

    #[error("random walk needs at least one increment")]
    EmptyIncrements,

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("spec is flagged oracle_only and cannot be used for {0}")]
    OracleOnlySpec(&'static str),

    #[error(
        "{missing:.3e} of the probability mass of x+X falls outside the fitted grid [{lo}, {hi}]"
    )]
    OutOfGrid { lo: f64, hi: f64, missing: f64 },

    #[error("rejection sampler gave up after {attempts} attempts with {accepted} accepted (acceptance rate {rate:.3e})")]
    AttemptsExhausted {
        attempts: u64,
        accepted: u64,
        rate: f64,
    },

    #[error("sum of importance weights is zero")]
    ZeroEffectiveSample,

    #[error("population in generation {generation} exceeds 2^63-1")]
    PopulationOverflow { generation: usize },

    #[error("oracle state space bound {bound:.3e} exceeds limit {limit:.3e}")]
    StateSpaceTooLarge { bound: f64, limit: f64 },

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error("config error in {origin}: {message}")]
    Config { origin: String, message: String },

    #[error("refusing to overwrite existing output directory {0}")]
    OutputExists(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
