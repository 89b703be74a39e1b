use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("mesh needs nx >= 2 and nt >= 2, got nx={nx}, nt={nt}")]
    InvalidMeshSize { nx: usize, nt: usize },

    #[error("time node {k} is outside 0..={nt}")]
    TimeNodeOutOfRange { k: usize, nt: usize },

    #[error("delta must be positive, got {0}")]
    InvalidDelta(f64),

    #[error("conjugate gradients stopped after {iterations} iterations at relative residual {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("paraboloid projection root solve failed for a={a}, |b|^2={b2}")]
    RootFindFailure { a: f64, b2: f64 },

    #[error("Huber source prox at time node {slice} stopped after {iterations} iterations (gradient norm {gradient:e})")]
    HuberNonConvergence {
        slice: usize,
        iterations: usize,
        gradient: f64,
    },

    #[error("field length {got} does not match the mesh ({expected})")]
    LengthMismatch { expected: usize, got: usize },

    #[error("{0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
