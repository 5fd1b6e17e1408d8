use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library and the CLI.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("probability below feasibility floor {floor:e}")]
    InfeasibleProbability { floor: f64 },
    #[error("dimension n too small for the requested probability (n <= 2 xi^2)")]
    DegenerateN,
    #[error("search ran away: {0}")]
    Runaway(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;
