use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("taxonomy line {line}: {message}")]
    Table { line: usize, message: String },
    #[error("duplicate taxonomy tag `{0}`")]
    DuplicateTag(String),
    #[error("metadata record: {0}")]
    Record(String),
    #[error("entry has no identity/count tags (empty C0)")]
    EmptyIdentityCluster,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("required cluster {0} is empty")]
    MissingCluster(&'static str),
    #[error("no candidates available for {0}")]
    EmptyPool(&'static str),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("duplicate manifest id `{0}`")]
    DuplicateId(String),
    #[error("cannot write manifest {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read manifest {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}
