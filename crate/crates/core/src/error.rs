use thiserror::Error;

pub type Result<T, E = LipError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LipError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    Symmetry { asymmetry: f64 },

    #[error("no convergence after {iterations} iterations (last estimate {last_estimate})")]
    Convergence { iterations: usize, last_estimate: f64 },

    #[error("weight matrix is identically zero")]
    ZeroWeight,

    #[error("column {column} of W is zero; use gamma_variant for weights with zero columns")]
    ZeroColumn { column: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible scaling: margin {margin:e} below tolerance -{tolerance:e}")]
    Feasibility { margin: f64, tolerance: f64 },

    #[error("problem too large for desk-scale routine: {0}")]
    Scale(String),

    #[error("LMI certificate fails: min eigenvalue {margin:e} below tolerance -{tolerance:e}")]
    LmiInfeasible { margin: f64, tolerance: f64 },

    #[error("layer {layer} carries no valid certificate")]
    Certificate { layer: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite value in matrix data")]
    NonFinite,

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LipError {
    fn from(e: std::io::Error) -> Self {
        LipError::Io(e.to_string())
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> LipError {
    LipError::Dimension(msg.into())
}
