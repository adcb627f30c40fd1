use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("covariance could not be factorized after jitter (dim {dim}, trace {trace:e})")]
    SingularCovariance { dim: usize, trace: f64 },

    #[error("component {component} has soft count {count:e} below the floor {floor:e}")]
    DegenerateComponent {
        component: usize,
        count: f64,
        floor: f64,
    },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sweep {sweep}, datum {datum}: {source}")]
    AtDatum {
        sweep: usize,
        datum: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_datum(self, sweep: usize, datum: usize) -> Self {
        Error::AtDatum {
            sweep,
            datum,
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularCovariance { .. } | Error::DegenerateComponent { .. } => true,
            Error::AtIteration { source, .. } | Error::AtDatum { source, .. } => {
                source.is_numerical()
            }
            _ => false,
        }
    }
}
