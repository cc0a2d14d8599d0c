use std::path::PathBuf;

use thiserror::Error;

use crate::model::{SampleId, SampleStatus};
use crate::sidecar::SidecarError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("format error: {0}")]
    Format(String),

    /// Embedding container record whose layout does not match the header.
    #[error("format error at record {record}: {reason}")]
    RecordFormat { record: u64, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("data error at record {record}: {reason}")]
    RecordData { record: u64, reason: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("illegal status transition for {sample}: {from} -> {to}")]
    IllegalTransition { sample: SampleId, from: SampleStatus, to: SampleStatus },

    #[error("index build error: {0}")]
    IndexBuild(String),

    #[error("missing {expert} embedding for sample {sample}")]
    MissingEmbedding { sample: SampleId, expert: String },

    #[error("acquisition error: {0}")]
    Acquisition(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Sidecar(#[from] SidecarError),

    #[error("refused: {0}")]
    Refused(String),

    #[error("project error: {0}")]
    Project(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }

    /// Stable machine-readable kind, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Parse(_) => "parse",
            Error::Format(_) | Error::RecordFormat { .. } => "format",
            Error::Data(_) | Error::RecordData { .. } => "data",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::IllegalTransition { .. } => "illegal_transition",
            Error::IndexBuild(_) => "index_build",
            Error::MissingEmbedding { .. } => "missing_embedding",
            Error::Acquisition(_) => "acquisition",
            Error::Protocol(_) => "protocol",
            Error::Sidecar(_) => "sidecar",
            Error::Refused(_) => "refused",
            Error::Project(_) => "project",
        }
    }
}
