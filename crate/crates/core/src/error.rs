use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy table: {0}")]
    InvalidPolicy(String),

    #[error("enumeration would visit {count} trajectories (limit {limit})")]
    EnumerationTooLarge { count: u128, limit: u128 },

    #[error("trajectory inconsistent with MDP: {0}")]
    InconsistentTrajectory(String),

    #[error("index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("invalid gap parameters: delta={delta}, epsilon={epsilon}")]
    InvalidGap { delta: f64, epsilon: f64 },

    #[error("optimal policy is not unique at state {state}")]
    NonUniqueOptimum { state: usize },

    #[error("scores do not yet rank the optimal action first at state {state}")]
    NotYetGreedy { state: usize },

    #[error("non-finite update at iteration {iteration}")]
    NonFiniteUpdate { iteration: u64 },

    #[error("critic relaxation diverged after {iterations} steps")]
    InnerLoopDiverged { iterations: u64 },

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
