use thiserror::Error;

/// Errors raised by instance construction, mechanism evaluation and auditing.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("conditioning event has zero prior mass")]
    ZeroMassEvent,

    #[error("outcome space is empty")]
    EmptyOutcomeSpace,

    #[error("no closed form registered for instance `{0}`")]
    NoClosedForm(String),

    #[error("reference distribution has zero mass on token {0}")]
    ZeroReferenceMass(usize),

    #[error("regularization weight must be positive, got {0}")]
    NonPositiveAlpha(f64),

    #[error("divergence undefined: x puts mass on token {0} where the reference has none")]
    DivergenceUndefined(usize),

    #[error("operation not supported for scenario `{0}`")]
    UnsupportedScenario(String),

    #[error("transfer kind `{0}` does not accept an estimate draw")]
    UnexpectedDraw(String),

    #[error("transfer kind `{0}` requires an estimate draw")]
    MissingDraw(String),

    #[error("pivot offset needs a sub-allocation, which is undefined for agent {0}")]
    NoSubAllocation(usize),

    #[error("estimator law unavailable: {0}")]
    EstimatorUnavailable(String),

    #[error("missing second-stage report from agent {0}")]
    MissingSecondStageReport(usize),

    #[error("utility spec for agent {0} declares no Lipschitz constant")]
    MissingLipschitzConstant(usize),

    #[error("evaluation budget exceeded: {needed} evaluations needed, budget {budget}")]
    BudgetExceeded { needed: u64, budget: u64 },

    #[error("condition (*) fails: posterior means differ by only {gap:e}")]
    ConditionStarFails { gap: f64 },

    #[error("precondition fails: {0}")]
    PreconditionFails(String),

    #[error("invalid scenario parameters: {0}")]
    InvalidScenarioParameters(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
