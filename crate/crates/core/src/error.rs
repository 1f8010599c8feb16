use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),
    #[error("tap site {site}: expected shape {expected:?}, got {got:?}")]
    TapShape {
        site: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("truncated file: needed {needed} bytes")]
    Truncated { needed: usize },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config: {0}")]
    Config(String),
    #[error("missing dataset at {0}")]
    MissingDataset(PathBuf),
    #[error("training diverged at step {step} (seed {seed}): {what}")]
    Diverged { step: usize, seed: u64, what: String },
    #[error("matrix square root did not converge")]
    SqrtNoConvergence,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
