use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A non-finite value reached a numerical routine.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("training diverged at iteration {iteration}")]
    TrainingDiverged { iteration: usize },

    #[error("rollout diverged for agent {agent} at step {step}")]
    RolloutDiverged { agent: usize, step: usize },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("agent {agent}: {source}")]
    Agent {
        agent: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// Persisted artifact does not belong to the consuming problem.
    #[error("incompatible {field}: expected {expected}, found {found}")]
    Incompatible {
        field: String,
        expected: String,
        found: String,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} contains a non-finite value")))
    }
}
