use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across model evaluation, weight selection and inference.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    InvalidModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A score could not be evaluated at the requested parameter.
    #[error("score domain error{}: {message}", pair.map(|(a, b)| format!(" at pair ({a}, {b})")).unwrap_or_default())]
    Domain {
        pair: Option<(usize, usize)>,
        message: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The penalized criterion is unbounded below: `lambda <= eta` on a singular covariance.
    #[error("ill-posed problem: lambda = {lambda:e} does not exceed eta = {eta:e}")]
    IllPosed { lambda: f64, eta: f64 },

    #[error("active-set system is numerically singular for indices {active:?}")]
    Conditioning { active: Vec<usize> },

    #[error("homotopy cycling detected: active set {active:?} revisited too often")]
    Cycling { active: Vec<usize> },

    #[error("unsupported model: {0}")]
    Unsupported(String),

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("root finding failed: {message}; trace: {trace:?}")]
    RootFinding { message: String, trace: Vec<(f64, f64)> },

    #[error("inference failed: {0}")]
    Inference(String),

    #[error("column {column} has zero residual variance")]
    DegenerateColumn { column: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical procedures, as opposed to bad configuration or input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Domain { .. }
                | Error::NonFinite(_)
                | Error::IllPosed { .. }
                | Error::Conditioning { .. }
                | Error::Cycling { .. }
                | Error::DegenerateCovariance(_)
                | Error::RootFinding { .. }
                | Error::Inference(_)
                | Error::DegenerateColumn { .. }
        )
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        Error::Parse {
            line,
            message: err.to_string(),
        }
    }
}
