use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("accountant overflow: {0}")]
    AccountantOverflow(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate privacy budgets: every client has zero forecast rounds")]
    DegenerateBudget,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("training diverged for client {client} in round {round}")]
    TrainingDivergence { client: usize, round: usize },

    #[error("no sparsification subproblem is feasible")]
    Infeasible,

    #[error("no eligible client can be scheduled this round")]
    EmptyRound,

    #[error("energy-infeasible client {client}: {reason}")]
    EnergyInfeasible { client: usize, reason: String },

    #[error("decision violates constraint {constraint}: {detail}")]
    Contract { constraint: &'static str, detail: String },

    #[error("idx format error: {0}")]
    Idx(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
