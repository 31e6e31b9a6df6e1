use std::path::PathBuf;
use thiserror::Error;

use crate::model::Side;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite value in parameter {0} after update")]
    NonFiniteParameter(String),
    #[error("{side:?} pass exceeded its action budget of {budget}")]
    ActionBudgetExhausted { side: Side, budget: usize },
    #[error("forced action #{index} ({action}) is illegal in the current state")]
    IllegalForcedAction { index: usize, action: String },
    #[error("forced action sequence ended before the tree was closed")]
    ForcedSequenceTooShort,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { path: PathBuf, offset: usize },
    #[error("line count mismatch: source has {source_lines} lines, target has {target_lines}")]
    LineCountMismatch {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("cannot translate an empty sentence")]
    EmptySentence,
    #[error("bad magic: not an LTT1 checkpoint")]
    BadMagic,
    #[error("truncated checkpoint while reading {0}")]
    Truncated(String),
    #[error("shape mismatch for {entry}: checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        entry: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing entry {0}")]
    MissingEntry(String),
    #[error("checkpoint entry {0} has no counterpart in the model")]
    UnexpectedEntry(String),
    #[error("malformed checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("pair skipped after {attempts} abandoned trajectories")]
    PairSkipped { attempts: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
