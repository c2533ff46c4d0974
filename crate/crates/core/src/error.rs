use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} grid values, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("degenerate metric: phi = {value:e} at index {index} (floor {floor:e})")]
    DegenerateMetric {
        index: usize,
        value: f64,
        floor: f64,
    },

    #[error("numerical blow-up at t = {time}")]
    NumericalBlowup { time: f64 },

    #[error("step budget of {budget} exhausted at t = {time} before reaching t_end = {t_end}")]
    StepBudget {
        budget: usize,
        time: f64,
        t_end: f64,
    },

    #[error("positivity violation: value {value:e} at index {index}, t = {time}")]
    PositivityViolation { time: f64, index: usize, value: f64 },

    #[error(
        "bootstrap window too short: tau0 = {tau0:e} but only {available:e} available before T"
    )]
    WindowTooShort { tau0: f64, available: f64 },

    #[error("normalization constraint violated: integral = {integral}, expected {expected}")]
    Constraint { integral: f64, expected: f64 },

    #[error("solver did not converge: {0}")]
    Solver(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
