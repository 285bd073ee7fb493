use std::path::PathBuf;

use crate::ids::{ClassId, RecordId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch normalization needs at least 2 rows in train mode, got {rows}")]
    DegenerateBatch { rows: usize },

    #[error("tape usage error: {0}")]
    Usage(String),

    #[error("ingestion failed at byte offset {offset}: {reason}")]
    Ingestion { offset: u64, reason: String },

    #[error("{class} has no records in the {split} split")]
    EmptyClass { class: ClassId, split: String },

    #[error("unknown class {0}")]
    UnknownClass(ClassId),

    #[error("unknown record {id} in the {split} split")]
    UnknownRecord { id: RecordId, split: String },

    #[error("{class} has {available} candidate records, {needed} needed")]
    InsufficientCandidates {
        class: ClassId,
        needed: usize,
        available: usize,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
