use thiserror::Error;

/// Errors produced by data loading, estimation, optimization, and simulation.
#[derive(Debug, Error)]
pub enum Error {
    /// Input file could not be parsed.
    #[error("parse error at {file}:{row}, column `{column}`: {message}")]
    Parse {
        file: String,
        row: usize,
        column: String,
        message: String,
    },

    /// Input data violates a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Matrix or vector dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Not enough trailing observations to evaluate a rolling quantity.
    #[error("insufficient history: need {needed} observations, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    /// A time index falls outside an arb's active lifetime.
    #[error("arb `{id}` inactive at t={t} (active over [{start}, {end}])")]
    Inactive {
        id: String,
        t: usize,
        start: usize,
        end: usize,
    },

    /// A basket references a ticker absent from the market data.
    #[error("unknown ticker `{ticker}` referenced by arb `{arb}`")]
    UnknownTicker { ticker: String, arb: String },

    /// The portfolio state cannot support a rebalance.
    #[error("infeasible state: {0}")]
    InfeasibleState(String),

    /// The conic solver terminated without an accepted solution.
    #[error("solver failure: status {status}")]
    SolverFailure { status: String },

    /// Realized cash dropped to zero or below; the simulation cannot continue.
    #[error("bankruptcy on {date}: cash {cash}")]
    Bankruptcy { date: String, cash: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
