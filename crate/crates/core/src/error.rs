use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // -- input validation ----------------------------------------------------
    #[error("matrix is empty")]
    EmptyMatrix,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("{which} is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { which: &'static str, asymmetry: f64 },

    #[error("{which} is not positive definite")]
    NotPositiveDefinite { which: &'static str },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("not enough samples: need {required}, have {available}")]
    InsufficientSamples { required: usize, available: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    // -- numerical failures --------------------------------------------------
    #[error("singular value decomposition did not converge")]
    SvdNoConvergence,

    #[error("eigenvalue iteration did not converge")]
    EigenNoConvergence,

    #[error("singular matrix in {0}")]
    Singular(String),

    #[error(
        "Riccati iteration did not converge after {iterations} iterations \
         (residual {residual:e}); the pair (A, B) is likely not stabilizable"
    )]
    RiccatiNoConvergence { iterations: usize, residual: f64 },

    #[error("closed loop is not stable: spectral radius {radius}")]
    UnstableClosedLoop { radius: f64 },

    #[error("non-finite derivative at t = {t}, state {state:?}")]
    NonFiniteDerivative { t: f64, state: Vec<f64> },

    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("event location for guard {guard} failed near t = {t}")]
    EventLocation { guard: usize, t: f64 },

    #[error("more than {limit} events within one step at t = {t} (chattering guard)")]
    Chattering { t: f64, limit: usize },

    #[error("bounce angle {theta_star} is unreachable; the swing peaks at |theta| = {max_theta}")]
    UnreachableBounce { theta_star: f64, max_theta: f64 },

    #[error("no section crossing within {cap} time units (fall or divergence)")]
    NoReturn { cap: f64 },

    #[error("system fell (left its admissible region) at t = {t}")]
    Fall { t: f64 },

    #[error("fixed-point search did not converge after {iterations} iterations (residual {residual:e})")]
    FixedPointNoConvergence { iterations: usize, residual: f64 },

    #[error("singular Jacobian (condition number {condition:e})")]
    SingularJacobian { condition: f64 },

    #[error("rollout diverged at step {step} (|v| = {norm:e})")]
    RolloutDiverged { step: usize, norm: f64 },

    #[error("reference exhausted at sample {index} (length {len})")]
    ReferenceExhausted { index: usize, len: usize },

    #[error("history buffer holds {have} of {need} states; run the nominal controller to warm it up")]
    BufferNotWarm { have: usize, need: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for errors caused by bad input rather than a numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::EmptyMatrix
                | Error::NonFinite(_)
                | Error::DimensionMismatch { .. }
                | Error::NotSquare { .. }
                | Error::NotSymmetric { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::InvalidParameter(_)
                | Error::InsufficientSamples { .. }
                | Error::Config(_)
                | Error::Parse(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::LengthMismatch { .. }
                | Error::UnreachableBounce { .. }
        )
    }

    /// Process exit code: 1 for validation errors, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            1
        } else {
            2
        }
    }
}
