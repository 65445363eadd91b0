use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0}: no valid pixels")]
    EmptyMask(&'static str),

    #[error("backward: loss must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("assemble: {count} uncovered pixels, first hole at (x={x}, y={y})")]
    Coverage { count: usize, x: usize, y: usize },

    #[error("{path}: {msg} (byte {offset})")]
    Parse {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at iteration {iteration}: non-finite {term}")]
    NonFiniteLoss { iteration: u64, term: String },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
