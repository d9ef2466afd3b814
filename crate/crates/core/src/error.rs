use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped so the CLI can map them onto exit codes:
/// input and configuration problems on one side, estimation and
/// identification failures on the other.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("test error: {0}")]
    Test(String),

    #[error("identification error: {0}")]
    Identification(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("optimization error: {0}")]
    Optimization(String),

    #[error("generator error: {0}")]
    Generator(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error: 1 for data and configuration
    /// problems, 2 for failures of the statistical procedures themselves.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_)
            | Error::Data(_)
            | Error::Config(_)
            | Error::Domain(_)
            | Error::Generator(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => 1,
            Error::Test(_)
            | Error::Identification(_)
            | Error::Estimation(_)
            | Error::Optimization(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
