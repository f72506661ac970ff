use thiserror::Error;

use crate::mdp::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {}", summarize(.0))]
    InvalidModel(Vec<Violation>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("deterministic policy count {count} exceeds the enumeration cap {cap}")]
    EnumerationCap { count: f64, cap: u64 },

    #[error("mixture solver did not converge after {iterations} iterations (gap {gap:.3e})")]
    NotConverged { iterations: usize, best_alpha: Vec<f64>, best_objective: f64, gap: f64 },

    #[error("planned budget of {planned} trajectories exceeds the cap of {cap}")]
    BudgetExceeded {
        planned: u64,
        cap: u64,
        /// Trajectories already spent before the abort.
        spent: u64,
    },

    #[error("stream {0} was requested twice")]
    StreamReused(u64),

    #[error("support violation: {0}")]
    Support(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn summarize(violations: &[Violation]) -> String {
    let mut out = violations.iter().take(5).map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
    if violations.len() > 5 {
        out.push_str(&format!(" (+{} more)", violations.len() - 5));
    }
    out
}
