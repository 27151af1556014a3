use thiserror::Error;

use crate::grid::BusId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown bus id {0}")]
    UnknownBus(BusId),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix {name} is singular or not positive definite")]
    SingularMatrix { name: &'static str },
    #[error("inverse of {name} violates the adjacency sparsity pattern at ({i},{j}): |{value:.3e}| > tol")]
    SparsityViolation {
        name: &'static str,
        i: usize,
        j: usize,
        value: f64,
    },
    #[error("power flow diverged: residual {residual:.3e} after {iterations} iterations")]
    Diverged { residual: f64, iterations: usize },
    #[error("projection did not converge within {max_iter} iterations (last step {step:.3e})")]
    ProjectionStalled { max_iter: usize, step: f64 },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty voltage trace")]
    EmptyTrace,
    #[error("message from bus {from} to non-neighbor bus {to} in round {round}")]
    LocalityViolation { from: BusId, to: BusId, round: usize },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
