use thiserror::Error;

/// Errors surfaced by the analysis library.
///
/// Variants map onto the CLI exit codes: schema/data/layer/config problems
/// are data errors, `Degenerate` and `Convergence` are diagnostic failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("layer error: {0}")]
    Layer(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("oracle guard exceeded: {0}")]
    OracleGuard(String),

    #[error("missing upstream artifact {path} (run `{stage}` first)")]
    MissingUpstream { stage: String, path: String },

    #[error("config hash mismatch: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Degenerate(_) | Error::Convergence(_) => 3,
            Error::Config(_) | Error::ConfigMismatch(_) => 1,
            _ => 2,
        }
    }
}
