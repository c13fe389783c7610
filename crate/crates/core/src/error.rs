use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("non-uniform sampling: {0}")]
    NonUniformSampling(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// The normal equations could not be factored at the requested damping.
    #[error("singular normal equations (pivot {pivot} at column {column})")]
    Singular { column: usize, pivot: f64 },

    #[error("integration diverged at step {step} (t = {time} s)")]
    Divergence { step: usize, time: f64 },

    #[error("invalid scenario: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
