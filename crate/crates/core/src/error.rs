use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor size overflows usize for shape {0:?}")]
    CapacityOverflow([usize; 4]),

    #[error("data length {actual} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: [usize; 4],
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: [usize; 4],
        actual: [usize; 4],
    },

    #[error("channel mismatch in {op}: expected {expected}, got {actual}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: output size would be negative for input {input} (kernel extent {extent}, padding {padding})")]
    NegativeOutputSize {
        op: &'static str,
        input: usize,
        extent: usize,
        padding: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic in tensor file")]
    BadMagic,

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated tensor file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("unknown ablation row `{0}`")]
    UnknownRow(String),

    #[error("unsatisfiable scene: {0}")]
    Unsatisfiable(String),

    #[error("{0}")]
    Empty(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
