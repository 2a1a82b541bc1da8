use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the conversion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("blob length mismatch: manifest references {expected} bytes, blob has {actual} bytes")]
    BlobLength { expected: usize, actual: usize },

    #[error("node '{node}': non-finite value at byte offset {byte_offset}")]
    NonFinite { node: String, byte_offset: usize },

    #[error("node '{node}': dangling input reference '{input}'")]
    DanglingInput { node: String, input: String },

    #[error("cycle detected at node '{0}'")]
    Cycle(String),

    #[error("duplicate node id '{0}'")]
    DuplicateId(String),

    #[error("node '{node}': shape mismatch: {detail}")]
    Shape { node: String, detail: String },

    #[error("node '{node}': invalid layer: {detail}")]
    InvalidLayer { node: String, detail: String },

    #[error("node '{node}': unsupported layer kind '{kind}'")]
    UnsupportedKind { node: String, kind: String },

    #[error("node '{node}': BatchNorm without a fusable producer")]
    UnfusableBatchNorm { node: String },

    #[error("node '{node}': ReLU without a fusable producer")]
    UnfusableRelu { node: String },

    #[error("node '{node}': sub-network port mismatch: {detail}")]
    PortMismatch { node: String, detail: String },

    #[error("node '{node}': non-finite intermediate value")]
    NonFiniteActivation { node: String },

    #[error("missing normalization statistics for node '{0}'")]
    MissingStats(String),

    #[error(
        "model '{0}' carries no normalization statistics; refusing to build a spiking network"
    )]
    Unnormalized(String),

    #[error("empty calibration batch")]
    EmptyCalibration,

    #[error("invalid simulation config: {0}")]
    SimConfig(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("undefined mAP: no ground-truth boxes in any class")]
    UndefinedMap,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidLayer {
            node: node.into(),
            detail: detail.into(),
        }
    }
}
