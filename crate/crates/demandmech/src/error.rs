//! Crate-wide error type.

use thiserror::Error;

use crate::oracle::{CentralSolution, KktReport};

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("constraint row {row} has negative rhs {value}")]
    NegativeRhs { row: usize, value: f64 },
    #[error("invalid utility: {0}")]
    InvalidUtility(String),
    #[error("value {value} outside domain [{lo}, {hi}]")]
    OutOfDomain { value: f64, lo: f64, hi: f64 },
    #[error("no feasible point found in {attempts} attempts")]
    SamplingFailed { attempts: usize },
    #[error("solver did not converge after {iters} iterations (max residual {residual:.3e})")]
    NotConverged {
        iters: usize,
        residual: f64,
        best: Box<CentralSolution>,
        report: Box<KktReport>,
    },
    #[error("solution fails KKT check at tolerance {tol:.3e} (max residual {residual:.3e})")]
    KktFailed { tol: f64, residual: f64 },
    #[error("graph is not connected")]
    Disconnected,
    #[error("helper {helper} is not a neighbor of user {user}")]
    InvalidHelper { user: usize, helper: usize },
    #[error("missing summary message: {0}")]
    MissingSummary(String),
    #[error("price set is empty")]
    InfeasiblePriceSet,
    #[error("projection active set did not terminate within {0} iterations")]
    MaxActiveSetIters(usize),
    #[error(
        "derivative bound violated for user {user}, slot {slot}: \
         v'({x}) = {derivative} outside [{lo}, {hi}]"
    )]
    BoundViolation {
        user: usize,
        slot: usize,
        x: f64,
        derivative: f64,
        lo: f64,
        hi: f64,
    },
    #[error("utility for user {user}, slot {slot} is not strongly concave on its domain")]
    NotStronglyConcave { user: usize, slot: usize },
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
