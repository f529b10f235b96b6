use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { what: String, iterations: usize, residual: f64 },

    #[error("{what} is singular or near-singular: {detail}")]
    Singular { what: String, detail: String },

    #[error("{what} is not symmetric (residual {residual:.3e})")]
    Asymmetric { what: String, residual: f64 },

    #[error("invalid problem: {0}")]
    Problem(String),
}

pub type Result<T> = std::result::Result<T, Error>;
