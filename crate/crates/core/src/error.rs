use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by map construction, rendering, and persistence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("image too small for {op}: need at least {min}x{min}, got {width}x{height}")]
    ImageTooSmall {
        op: &'static str,
        min: usize,
        width: usize,
        height: usize,
    },

    #[error("frame {0} has no depth map")]
    MissingDepth(u64),

    #[error("keyframe {0} has no anchor entry")]
    MissingAnchor(u64),

    #[error("pose lists differ in length: {0} vs {1}")]
    PoseListMismatch(usize, usize),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed PLY header: {0}")]
    PlyHeader(String),

    #[error("PLY is missing property {0}")]
    PlyMissingProperty(String),

    #[error("PLY payload truncated: expected {expected} bytes, got {got}")]
    PlyTruncated { expected: usize, got: usize },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("cannot parse {file}:{line}: {reason}")]
    ParseLine {
        file: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("no rgb/depth/pose associations within the time threshold")]
    NoAssociations,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
