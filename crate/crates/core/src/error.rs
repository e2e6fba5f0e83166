use std::path::PathBuf;

/// Errors produced anywhere in the frontend pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} has shape {lhs_shape:?}, {rhs} has shape {rhs_shape:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        lhs_shape: Vec<usize>,
        rhs: String,
        rhs_shape: Vec<usize>,
    },
    #[error("invalid shape for {op} at {node}: {detail}")]
    InvalidShape {
        op: &'static str,
        node: String,
        detail: String,
    },
    #[error("non-finite value produced by {op} at {node}")]
    NonFinite { op: &'static str, node: String },
    #[error("missing feed for placeholder `{0}`")]
    MissingFeed(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: String, shape: Vec<usize> },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("target unreachable: {target_len} labels ({repeats} repeats) need more than {frames} frames")]
    TargetUnreachable {
        target_len: usize,
        repeats: usize,
        frames: usize,
    },
    #[error("empty mask: no real frames to average over")]
    EmptyMask,
    #[error("wav {path}: {detail}")]
    Wav { path: PathBuf, detail: String },
    #[error("utterance shorter than one window ({0} samples)")]
    TooShort(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("non-finite loss at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
