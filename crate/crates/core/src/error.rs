use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("mask contains no lesion pixels")]
    EmptyMask,
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("infeasible constraint set: {0}")]
    InfeasibleConstraints(String),
    #[error("projection did not converge after {iterations} sweeps (max residual {max_residual:.3e})")]
    NotConverged {
        iterations: usize,
        max_residual: f64,
        residuals: Vec<f64>,
    },
    #[error("view fusion is degenerate: every class has zero probability in the product")]
    DegenerateFusion,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tensor format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
