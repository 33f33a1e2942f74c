use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
///
/// `Structural` and `Invalid` are input problems (exit status 2 from the
/// CLI); everything else is a runtime failure (exit status 1).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset structure: {0}")]
    Structural(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("io {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Structural(_)
                | Error::Invalid(_)
                | Error::Shape { .. }
                | Error::MissingArtifact(_)
                | Error::Config(_)
        )
    }

    /// Short machine-readable tag used in CLI error lines.
    /// The detail without the kind prefix that `Display` adds.
    pub fn message(&self) -> String {
        match self {
            Error::Structural(m) | Error::Invalid(m) | Error::Config(m) => m.clone(),
            Error::Shape { expected, got } => format!("expected {expected}, got {got}"),
            Error::MissingArtifact(p) => p.display().to_string(),
            Error::NonFinite { step, detail } => format!("at step {step}: {detail}"),
            Error::Tensor(e) => e.to_string(),
            Error::Image { path, source } => format!("{}: {source}", path.display()),
            Error::Io { path, source } => format!("{}: {source}", path.display()),
            Error::Json(e) => e.to_string(),
            Error::Csv(e) => e.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Structural(_) => "structural",
            Error::Invalid(_) => "invalid",
            Error::Shape { .. } => "shape",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::NonFinite { .. } => "non_finite",
            Error::Tensor(_) => "tensor",
            Error::Image { .. } => "image",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Config(_) => "config",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
