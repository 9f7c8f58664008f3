use thiserror::Error;

/// Errors raised by the numeric and orchestration layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty group")]
    EmptyGroup,

    #[error("degenerate group: need at least 2 rewards, got {0}")]
    DegenerateGroup(usize),

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("no instances to score")]
    NoInstances,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("infeasible environment spec: {0}")]
    InfeasibleSpec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training interrupted at step {0}")]
    Interrupted(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
