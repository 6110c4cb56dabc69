use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid landscape: {0}")]
    InvalidLandscape(String),

    #[error("interaction function is not positive at u = {u} (c = {value})")]
    NonPositiveInteraction { u: f64, value: f64 },

    #[error("H3 violated at u = {u}: equilibrium dose denominator {denominator:e} is not negative")]
    H3Violation { u: f64, denominator: f64 },

    #[error("non-finite vector field at (u, n) = ({u}, {n})")]
    NonFinite { u: f64, n: f64 },

    #[error("step size underflow at t = {t} (state u = {u}, n = {n})")]
    StepUnderflow { t: f64, u: f64, n: f64 },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("dose range [{lo}, {hi}] is not hyperbolic; degenerate equilibria near u = {witnesses:?}")]
    NotHyperbolic {
        lo: f64,
        hi: f64,
        witnesses: Vec<f64>,
    },

    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("equilibrium at u = {u} is not a saddle")]
    NotASaddle { u: f64 },

    #[error("orbit construction failed: {0}")]
    Orbit(String),

    #[error("boundary curve does not close: {0}; epsilon too large or window too small")]
    NotClosed(String),

    #[error("optimal control did not converge: {0}")]
    NoConvergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
