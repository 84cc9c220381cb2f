use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite loss value {value}")]
    NonFiniteLoss { value: f64 },

    #[error("inner step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("task {task}: {source}")]
    InTask {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("trajectory is incomplete: {0}")]
    IncompleteTrajectory(String),

    #[error("parameter space mismatch: {0}")]
    SpaceMismatch(String),

    #[error("degenerate denominator {0} in induced hyper-parameters")]
    DegenerateDenominator(f64),

    #[error("invalid hyper-parameters: {0}")]
    InvalidHyperParams(String),

    #[error("centroid rejection sampling failed after {0} attempts")]
    RejectionOverflow(usize),

    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),

    #[error("invalid window schedule: {0}")]
    InvalidSchedule(String),
}

impl Error {
    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub fn in_task(self, task: usize) -> Self {
        Error::InTask {
            task,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
