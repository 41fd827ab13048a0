//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate curve: total arc length {length} mm is below 1e-9 mm")]
    DegenerateCurve { length: f64 },

    #[error("curve fit did not reach feasibility: final constraint residual {residual}")]
    FitNotConverged { residual: f64 },

    #[error("structure is fully locked: constraint Jacobian leaves no free motion")]
    LockedStructure,

    #[error("degenerate spring {id}: endpoints closer than 1e-9 mm")]
    DegenerateSpring { id: usize },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("design bounds infeasible: {0}")]
    InfeasibleBounds(String),

    #[error("non-finite state encountered: {0}")]
    NonFinite(String),

    #[error("spring placement failed: {0}")]
    Placement(String),

    #[error("simulation diverged: {0}")]
    SimDiverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
