use thiserror::Error;

use crate::model::Action;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("action {action:?} is not legal in state {state}")]
    InvalidAction { action: Action, state: String },

    #[error("state space has {count} states, above the ceiling of {ceiling}")]
    Intractable { count: usize, ceiling: usize },

    #[error("policy has no action for state {0}")]
    IncompletePolicy(String),

    #[error("numerical error: {message} (residual {residual:e})")]
    Numerical { message: String, residual: f64 },

    #[error("policy evaluation did not converge after {sweeps} sweeps (final delta {delta:e})")]
    EvaluationDiverged { sweeps: usize, delta: f64 },

    #[error("policy iteration did not stabilise after {rounds} rounds; {flipping} states still changing, e.g. {example}")]
    PolicyOscillation {
        rounds: usize,
        flipping: usize,
        example: String,
    },

    #[error("optimality gap undefined: reference profit {0} is not positive")]
    GapUndefined(f64),

    #[error("environment stepped before reset")]
    NotReset,

    #[error("policy file was built for config {expected}, but the given config hashes to {found}")]
    ConfigMismatch { expected: String, found: String },

    #[error("sweep cell {cell} failed: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
