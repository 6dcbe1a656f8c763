use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported backend: {0}")]
    UnsupportedBackend(String),
    #[error("step size too large: {reason} (suggested dt <= {suggested_dt:e})")]
    StepSize { reason: String, suggested_dt: f64 },
    #[error("fixed point did not converge at step {step} after {iterations} iterations (last change {last_change:e})")]
    Convergence {
        step: usize,
        iterations: usize,
        last_change: f64,
    },
    #[error("ill-conditioned regression at step {step}: condition number {condition:e}")]
    Regression { step: usize, condition: f64 },
    #[error("lattice resolution: {0}")]
    Resolution(String),
    #[error("consistency violation: {0}")]
    Consistency(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("singular flow: D_y eta = {0:e}")]
    SingularFlow(f64),
    #[error("no closed form available: {0}")]
    UnsupportedOracle(String),
    #[error("unstable explicit scheme: {reason} (suggested n_steps >= {suggested_steps})")]
    Stability {
        reason: String,
        suggested_steps: usize,
    },
    #[error("invalid barrier: {0}")]
    InvalidBarrier(String),
    #[error("verification failure: {0}")]
    Verification(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
