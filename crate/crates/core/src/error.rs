use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: u32, vocab: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("decomposition failed: {reason} (residual {residual:.3e}, condition {condition:.3e})")]
    Decomposition { reason: String, residual: f64, condition: f64 },
    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("all {0} attack candidates diverged")]
    AllDiverged(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
