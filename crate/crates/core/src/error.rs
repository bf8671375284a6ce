use thiserror::Error;

pub type Result<T> = std::result::Result<T, SensiError>;

#[derive(Debug, Error)]
pub enum SensiError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("line {line}, column `{column}`: {message}")]
    BadValue {
        line: usize,
        column: String,
        message: String,
    },

    #[error("no strata")]
    NoStrata,

    #[error("stratum `{stratum}`: {message}")]
    InvalidStratum { stratum: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate statistic: zero variance")]
    DegenerateStatistic,

    #[error("enumeration cap exceeded: {size} > {cap}")]
    CapExceeded { size: f64, cap: f64 },

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error(
        "solver stopped after {iterations} Newton steps without convergence \
         (incumbent {incumbent:.6e}, gap {gap:.3e})"
    )]
    SolverStalled {
        incumbent: f64,
        gap: f64,
        iterations: usize,
    },

    #[error("{failed} of {total} replicates failed in the solver")]
    TooManyFailures { failed: usize, total: usize },
}

impl SensiError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SensiError::InvalidInput(msg.into())
    }

    /// True for errors caused by the numerical engine rather than the input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            SensiError::SolverStalled { .. } | SensiError::TooManyFailures { .. }
        )
    }
}
