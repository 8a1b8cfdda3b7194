use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence of {len} tokens exceeds the effective context of {max} tokens")]
    ContextOverflow { len: usize, max: usize },

    #[error("layer {layer} out of range 1..={layer_count}")]
    LayerOutOfRange { layer: usize, layer_count: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("{0}")]
    OutOfRange(String),

    #[error("backend does not support {0}")]
    Capability(&'static str),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("insufficient competitors: {0}")]
    InsufficientCompetitors(String),

    #[error("search infeasible: {0}")]
    SearchInfeasible(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("plot rendering failed: {0}")]
    Plot(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ContextOverflow { .. } => "context_overflow",
            Error::LayerOutOfRange { .. } => "layer_out_of_range",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::OutOfRange(_) => "out_of_range",
            Error::Capability(_) => "capability",
            Error::Input(_) => "input",
            Error::InsufficientData(_) => "insufficient_data",
            Error::InsufficientCompetitors(_) => "insufficient_competitors",
            Error::SearchInfeasible(_) => "search_infeasible",
            Error::Aggregation(_) => "aggregation",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Backend(_) => "backend",
            Error::Plot(_) => "plot",
            Error::Verification(_) => "verification",
            Error::Config(_) => "config",
            Error::Stage { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
