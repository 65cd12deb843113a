use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("point outside chart domain: {0}")]
    OutsideChart(String),
    #[error("point not in chart overlap")]
    NotInOverlap,
    #[error("zero velocity not allowed")]
    ZeroVelocity,
    #[error("step size underflow at s = {s}")]
    StepUnderflow { s: f64 },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("no connecting geodesic found within budget")]
    NoConnection,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
