use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// The orbit came within `1e-8` of a zero of the field.
    #[error("speed {speed:e} below underflow threshold at step {step}")]
    SpeedUnderflow { step: usize, speed: f64 },

    #[error("tangent map determinant drifted to {det} at step {step} (|det - 1| > {tol:e})")]
    DeterminantDrift { step: usize, det: f64, tol: f64 },

    #[error("R-diagonal entry {value:e} underflowed at block {block}")]
    IllConditioned { block: usize, value: f64 },

    #[error("splitting degenerate at mark {mark}: principal angle {angle:e}")]
    SplitDegenerate { mark: usize, angle: f64 },

    #[error("finite-time filtration unstable: drift {drift:e}")]
    InconclusiveSplitting { drift: f64 },

    #[error("no dominated splitting at the requested index")]
    NotDominated,

    #[error("no mixing needed: domination ratio {ratio} < 1/2 at the base mark")]
    NoMixingNeeded { ratio: f64 },

    #[error("angle budget exceeded: {detail}")]
    AngleBudgetExceeded { detail: String, min_m: Option<usize> },

    #[error("kappa budget overflow: {total} (limit {limit})")]
    KappaOverflow { total: f64, limit: f64 },

    #[error("quotient cocycle ill-conditioned at mark {mark}: {cond} > {bound}")]
    QuotientIllConditioned { mark: usize, cond: f64, bound: f64 },

    #[error("horizon too short; minimal feasible horizon: {minimal:?}")]
    HorizonTooShort { minimal: Option<usize> },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
