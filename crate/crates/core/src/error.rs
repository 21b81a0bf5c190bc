//! Crate-wide error type.
//!
//! Errors are classified as validation errors (bad caller input) or numerical
//! failures (a computation that could not be carried out); the CLI maps the
//! two kinds onto distinct exit codes.

/// Broad classification used for exit-code mapping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
}

#[derive(Clone, Debug, thiserror::Error)]
pub enum Error {
    #[error("patch dims must be nonempty")]
    EmptyDims,
    #[error("patch dim at index {index} must be >= 1")]
    ZeroDim { index: usize },
    #[error("invalid patch range [{l}:{r}] for K={k} patches")]
    PatchRange { l: usize, r: usize, k: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{what}: dimension mismatch (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("covariance is not symmetric (relative asymmetry {max_asymmetry:.3e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("covariance is not positive-definite (Cholesky failed)")]
    NotPositiveDefinite,
    #[error("invalid mixture weights: {why}")]
    InvalidWeights { why: String },
    #[error("conditioning failed: prefix covariance is singular")]
    ConditioningFailed,
    #[error("diffusion time must be nonnegative, got {t}")]
    NegativeTime { t: f64 },
    #[error("perturbation size must be nonnegative, got {eps}")]
    NegativeEps { eps: f64 },
    #[error("tail width delta={delta} outside the admissible interval (0, {max}]")]
    TailWidth { delta: f64, max: f64 },
    #[error("total time T={t_total} must exceed 1")]
    Horizon { t_total: f64 },
    #[error("max step eta={eta} must lie in (0, 1]")]
    StepSize { eta: f64 },
    #[error("invalid {what}: {why}")]
    InvalidInput { what: &'static str, why: String },
    #[error("score returned a non-finite value at sample {sample}, step {step}")]
    NonFiniteScore { sample: usize, step: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("geometry does not fit the canvas after {attempts} attempts")]
    GeometryOverflow { attempts: usize },
    #[error("patch size {size} does not divide {width}x{height}")]
    PatchSize {
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("empty color mask for required element \"{element}\"")]
    EmptyMask { element: &'static str },
    #[error("too few extractable samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("no window with variance <= threshold (minimum variance found {min_variance:.3e})")]
    NoStableWindow { min_variance: f64 },
    #[error("trace metadata mismatch: {what}")]
    MetadataMismatch { what: String },
    #[error("training diverged at step {step} (loss {loss:.3e})")]
    TrainingDiverged {
        step: usize,
        loss: f64,
        trace: Vec<f64>,
    },
    #[error("i/o: {0}")]
    Io(String),
    #[error("parse error in {what}: {why}")]
    Parse { what: &'static str, why: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NotPositiveDefinite
            | Error::ConditioningFailed
            | Error::NonFiniteScore { .. }
            | Error::NonFinite { .. }
            | Error::GeometryOverflow { .. }
            | Error::NoStableWindow { .. }
            | Error::TrainingDiverged { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
