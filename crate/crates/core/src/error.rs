use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("operator assembly failed: {0}")]
    Assembly(String),

    #[error("trajectory {trajectory} diverged at step {step} (|x| = {radius:.3e})")]
    Divergence {
        trajectory: usize,
        step: usize,
        radius: f64,
    },

    #[error("trajectory did not return to the section within {horizon} time units")]
    Timeout { horizon: f64 },

    #[error("ensemble is empty")]
    EmptyEnsemble,

    #[error("lag {lag} exceeds trajectory length {len}")]
    LagTooLong { lag: usize, len: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("null space of the generator is not one-dimensional (second eigenvalue {second:.3e})")]
    NullSpace { second: f64 },

    #[error("periodic MRT problem is inconsistent: Fredholm residual {residual:.3e} exceeds {tolerance:.1e}")]
    Incompatible { residual: f64, tolerance: f64 },

    #[error("not oscillatory: {0}")]
    NonOscillatory(String),

    #[error("eigensolver: {0}")]
    Eigen(String),

    #[error("eigenfunction vanishes at node {node} (|Q| = {modulus:.3e}); the phaseless set intrudes on the grid")]
    ZeroCrossing { node: usize, modulus: f64 },

    #[error("h-transform requires a strictly positive function: {0}")]
    Positivity(String),

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("point ({x:.4}, {y:.4}) lies outside the annulus")]
    OutOfCoverage { x: f64, y: f64 },

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("trajectory settles on a fixed point near ({x:.4}, {y:.4})")]
    FixedPoint { x: f64, y: f64 },

    #[error("{masked_fraction:.1}% of samples fell outside the annulus (limit 10%)")]
    ExcessiveMasking { masked_fraction: f64 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the name of the pipeline stage that raised it.
    pub fn at(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}
