use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid chain spec: {0}")]
    InvalidSpec(String),

    #[error("unsupported excitation sector k={0}; only k <= 2 is simulated")]
    UnsupportedSector(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("operator is not Hermitian (max |H - H^+| = {0:e})")]
    NonHermitian(f64),

    #[error("eigensolver failed to converge: {0}")]
    Eigen(String),

    #[error("degenerate time window [{0}, {1}]")]
    DegenerateWindow(f64, f64),

    #[error("boundary optimization did not converge; best ratios ({r1:.6}, {r2:.6}) value {value:.6}")]
    NonConvergence { r1: f64, r2: f64, value: f64 },

    #[error("invalid two-qubit state: {0}")]
    InvalidState(String),

    #[error("no feasible phi found in {restarts} restarts; best residual {best_residual:e}")]
    NoFeasiblePoint {
        restarts: usize,
        best_residual: f64,
        best: Box<crate::optimizer::OptimizationResult>,
    },

    #[error("invalid optimization task: {0}")]
    InvalidTask(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
