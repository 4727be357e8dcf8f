use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: invalid TOML: {message}")]
    Toml { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input {path} changed since the manifest was written (expected sha256 {expected}, found {found})")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Core(#[from] catext_core::Error),
}

impl CliError {
    /// Short stable tag for machine consumers.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Json { .. } => "json",
            CliError::Toml { .. } => "toml",
            CliError::Format { .. } => "format",
            CliError::Config(_) => "config",
            CliError::HashMismatch { .. } => "hash_mismatch",
            CliError::Core(_) => "core",
        }
    }

    /// One-line JSON object `{"error": kind, "message": text}`.
    pub fn to_json_line(&self) -> String {
        let message = self.to_string().replace(['\n', '\r'], " ");
        serde_json::json!({ "error": self.kind(), "message": message }).to_string()
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
