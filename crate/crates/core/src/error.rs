use std::path::PathBuf;

use thiserror::Error;

use crate::config::Violation;

pub type Result<T, E = PiiError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PiiError {
    #[error("invalid configuration: {}", format_violations(.0))]
    Config(Vec<Violation>),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// The model cannot provide what the requested objective needs.
    #[error("capability error: {0}")]
    Capability(String),

    #[error("numerical divergence at stage {stage}, iteration {iteration}: {detail}")]
    Divergence {
        stage: usize,
        iteration: usize,
        detail: String,
    },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PiiError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PiiError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            PiiError::Config(_) => "config",
            PiiError::Parameter(_) => "parameter",
            PiiError::Shape(_) => "shape",
            PiiError::Capability(_) => "capability",
            PiiError::Divergence { .. } => "divergence",
            PiiError::Ingestion(_) => "ingestion",
            PiiError::Layout(_) => "layout",
            PiiError::Format(_) => "format",
            PiiError::Io { .. } => "io",
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
