use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bit allocation: total_bits={total_bits}, int_bits={int_bits}")]
    InvalidBitAllocation { total_bits: u32, int_bits: u32 },

    #[error("non-finite input value {0}")]
    NonFiniteInput(f64),

    #[error("fixed-point format mismatch: {0} vs {1}")]
    FormatMismatch(String, String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("network needs at least an input and an output dimension")]
    EmptyDims,

    #[error("value {value} is not on the {format} grid")]
    OffGrid { value: f64, format: String },

    #[error("accumulator overflow: dot product of length {0} exceeds the guard bits")]
    AccumulatorOverflow(usize),

    #[error("odd number of bits ({0}) cannot be mapped to 4-QAM symbols")]
    OddLengthInput(usize),

    #[error("transform length {0} is not a power of two")]
    NonPowerOfTwo(usize),

    #[error("cyclic prefix of {cp_len} samples does not fit a symbol of {len}")]
    CpTooLong { cp_len: usize, len: usize },

    #[error("reference signal has zero power")]
    ZeroReference,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss={loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("checksum mismatch in {0}")]
    ChecksumMismatch(PathBuf),

    #[error("unsupported artifact version {0}")]
    VersionUnsupported(String),

    #[error("malformed artifact: {0}")]
    MalformedArtifact(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
