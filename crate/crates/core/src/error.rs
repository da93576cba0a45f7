use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{name} = {value} is outside the admissible range {range}")]
    Domain {
        name: &'static str,
        value: f64,
        range: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid delay: {0}")]
    InvalidDelay(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel is not symmetric (max asymmetry {max_asymmetry:e}, tolerance {tolerance:e})")]
    NotSymmetric { max_asymmetry: f64, tolerance: f64 },

    #[error("spectrum violation in {context}: eigenvalue {eigenvalue} reaches the bound {bound}")]
    SpectrumViolation {
        context: String,
        eigenvalue: f64,
        bound: f64,
    },

    #[error("covariance is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    Conditioning { min_eigenvalue: f64 },

    #[error("perturbation is not adapted to the delayed filtration: {0}")]
    InvalidPerturbation(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(name: &'static str, value: f64, range: impl Into<String>) -> Self {
        Error::Domain {
            name,
            value,
            range: range.into(),
        }
    }
}
