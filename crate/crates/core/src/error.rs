use thiserror::Error;

/// Errors produced across the toolkit.
///
/// Variants are grouped so a CLI can map them onto process exit codes:
/// configuration problems, data problems and numerical divergence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    Input(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDivergence { epoch: usize, loss: f64 },

    #[error("sampler diverged at step {step} (path {path})")]
    SamplerDivergence { step: usize, path: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("data error at row {row}, column {column}: {message}")]
    Ingestion {
        row: usize,
        column: String,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("unknown category level {level:?} in column {column}")]
    UnseenLevel { column: String, level: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for this error class: 2 config, 3 data, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Argument(_)
            | Error::Shape(_)
            | Error::Domain(_)
            | Error::Json(_) => 2,
            Error::Input(_)
            | Error::Ingestion { .. }
            | Error::Data(_)
            | Error::UnseenLevel { .. }
            | Error::Csv(_)
            | Error::Io(_) => 3,
            Error::Singular(_)
            | Error::TrainingDivergence { .. }
            | Error::SamplerDivergence { .. }
            | Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
