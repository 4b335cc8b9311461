use thiserror::Error;

/// Errors raised by the numerical laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {input}: {reason}")]
    InvalidModel { input: String, reason: String },

    #[error("model rejected: {0}")]
    ModelRejected(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{stage} did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence {
        stage: String,
        iterations: usize,
        residual: f64,
    },

    #[error("profile does not fit the domain: boundary value {tail:.3e} relative to peak")]
    TailTruncation { tail: f64 },

    #[error("h-continuation failed: reached h = {reached} of {target} (last error: {last})")]
    ContinuationFailed {
        reached: f64,
        target: f64,
        last: String,
    },

    #[error("degenerate threshold: epsilon*(N+1) = lambda within tolerance (epsilon = {epsilon}, lambda = {lambda})")]
    DegenerateThreshold { epsilon: f64, lambda: f64 },

    #[error("ill-conditioned biorthogonalization (condition estimate {condition:.3e})")]
    Conditioning { condition: f64 },

    #[error("singular system at shift {shift_re}+{shift_im}i; nearest eigenvalue estimate {nearest_re}+{nearest_im}i")]
    SingularSystem {
        shift_re: f64,
        shift_im: f64,
        nearest_re: f64,
        nearest_im: f64,
    },

    #[error("blow-up at t = {time}: {reason}")]
    BlowUp { time: f64, reason: String },

    #[error("decomposition lost: {0}")]
    DecompositionLost(String),

    #[error("lambda = {lambda} outside cached range [{lo}, {hi}]")]
    OutOfRange { lambda: f64, lo: f64, hi: f64 },

    #[error("fit unavailable: {0}")]
    FitUnavailable(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
