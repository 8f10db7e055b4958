use thiserror::Error;

/// Errors produced by fitting, planning and simulation routines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("sample contains no points")]
    EmptySample,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("bandwidth widening exhausted at h = {last_bandwidth} with {in_window} in-window points")]
    BandwidthExhausted { last_bandwidth: f64, in_window: usize },
    #[error("derivative estimate {deriv} at or below floor {floor}; interval would be unbounded")]
    FlatDerivative { deriv: f64, floor: f64 },
    #[error("invalid stage plan: {0}")]
    InvalidPlan(String),
    #[error("stage-two interval [{lower}, {upper}] narrower than {min_width}")]
    IntervalTooNarrow { lower: f64, upper: f64, min_width: f64 },
    #[error("Wald planning requires variance and derivative estimates")]
    MissingNuisance,
    #[error("argmin hit the simulation grid boundary in {boundary_fraction:.4}% of paths; widen the grid")]
    GridTooNarrow { boundary_fraction: f64 },
    #[error("probability {p} outside tabulated range [{min}, {max}]")]
    QuantileOutOfRange { p: f64, min: f64, max: f64 },
    #[error("rate recursion left (0, 1/2) at stage {stage} (gamma = {gamma})")]
    InvalidSlack { stage: usize, gamma: f64 },
    #[error("fitted line is not increasing (slope = {slope}); root inversion inapplicable")]
    NonIncreasingFit { slope: f64 },
    #[error("budget {budget} exceeds population size {population}")]
    BudgetExceedsPopulation { budget: usize, population: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
