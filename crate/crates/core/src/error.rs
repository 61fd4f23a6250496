use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid item {item_id:?}: {reason}")]
    InvalidItem { item_id: String, reason: String },

    #[error("corpus is empty after filtering")]
    EmptyCorpus,

    #[error("sequence of length {0} cannot be split; at least 3 interactions are required")]
    Split(usize),

    #[error("invalid synthetic corpus spec: {0}")]
    SynthSpec(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("encoding bug: {table} index {index} out of bounds for {len} rows")]
    IndexOutOfBounds { table: &'static str, index: usize, len: usize },

    #[error("non-finite activations after encoder layer {layer}")]
    NumericFailure { layer: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    TrainingFailure {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("zero-norm vector in {0}; cosine similarity undefined")]
    ZeroNorm(&'static str),

    #[error("parameter structure mismatch: {0}")]
    Structure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vocabulary hash mismatch: checkpoint has {found}, expected {expected}")]
    VocabMismatch { expected: String, found: String },

    #[error("corrupt checkpoint section {section:?}: {reason}")]
    Checkpoint { section: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by bad inputs or configuration rather than by
    /// the computation itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidItem { .. }
                | Error::EmptyCorpus
                | Error::Split(_)
                | Error::SynthSpec(_)
                | Error::Empty(_)
                | Error::Config(_)
                | Error::VocabMismatch { .. }
                | Error::Checkpoint { .. }
                | Error::Parse { .. }
        )
    }
}
