use thiserror::Error;

/// Errors produced anywhere in the CIRRL pipeline.
#[derive(Debug, Error)]
pub enum CirrlError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("intervention too strong: test covariance has eigenvalue {eigenvalue:.6e} < 0")]
    PerturbationTooStrong { eigenvalue: f64 },

    #[error("rank deficient system: smallest singular value {sigma_min:.6e} (largest {sigma_max:.6e})")]
    RankDeficient { sigma_min: f64, sigma_max: f64 },

    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:.6e}")]
    NotPsd { eigenvalue: f64 },

    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },

    #[error("gradient descent diverged: objective increased for {steps} consecutive steps; reduce the step size")]
    StepSize { steps: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{method}: {source}")]
    Method {
        method: String,
        #[source]
        source: Box<CirrlError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl CirrlError {
    /// Tags an error with the method (pipeline stage) that produced it.
    pub fn in_method(self, method: impl Into<String>) -> Self {
        CirrlError::Method {
            method: method.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, CirrlError>;
