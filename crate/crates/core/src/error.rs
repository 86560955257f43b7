use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image '{id}' has no matching mask")]
    MissingMask { id: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("mask of {height}x{width} cannot be split into a {n}x{n} grid")]
    NonDivisible { height: usize, width: usize, n: usize },

    #[error("window {window:?} out of bounds for array of {height}x{width}")]
    OutOfBounds {
        window: (usize, usize, usize, usize),
        height: usize,
        width: usize,
    },

    #[error("feature vector is not L2-normalized (norm {norm})")]
    Unnormalized { norm: f64 },

    #[error("loss component {component} is not finite ({value})")]
    NonFinite { component: &'static str, value: f64 },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    InvalidConfig(Vec<String>),

    #[error("invalid backbone descriptor: {0}")]
    InvalidDescriptor(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
