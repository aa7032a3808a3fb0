use std::path::PathBuf;

use crate::corpus::CorpusError;
use crate::embedstore::StoreError;
use crate::evalharness::EvalError;
use crate::promptkit::PromptError;
use crate::rankparse::ParseError;
use crate::retriever::RetrievalError;
use crate::teacher::TeacherError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline-level error. Stage modules keep their own error enums; this type
/// is what the orchestration layers (dataset generation, evaluation) return.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
