use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid geometry in {op}: {detail}")]
    InvalidGeometry { op: &'static str, detail: String },

    #[error("empty reduction over axes {axes:?} of shape {shape:?}")]
    EmptyReduction { axes: Vec<usize>, shape: Vec<usize> },

    #[error("invalid axes {axes:?} for rank {rank}")]
    InvalidAxes { axes: Vec<usize>, rank: usize },

    #[error("numeric overflow in {0}: non-finite value produced")]
    NumericOverflow(String),

    #[error("invalid group count: {channels} channels cannot be split into {groups} groups")]
    InvalidGroups { channels: usize, groups: usize },

    #[error("invalid config at `{path}`: {reason}")]
    InvalidConfig { path: String, reason: String },

    #[error("backward called on `{0}` without a cached forward")]
    NoCachedForward(String),

    #[error("running statistics of `{0}` are not initialised for inference")]
    UninitializedStats(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("truncated record at byte offset {offset} in {path}")]
    TruncatedRecord { path: PathBuf, offset: u64 },

    #[error("label {label} out of range at byte offset {offset} in {path}")]
    LabelOutOfRange {
        path: PathBuf,
        offset: u64,
        label: u8,
    },

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated at byte offset {0}")]
    Truncated(u64),

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("checkpoint does not match network: first mismatching tensor `{0}`")]
    CheckpointMismatch(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("block selector matched no attention block")]
    EmptySelection,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
