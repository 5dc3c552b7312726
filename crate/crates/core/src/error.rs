use std::io;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by the kind of failure rather than by module, so a
/// caller (the CLI in particular) can map them onto stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// The sink failed part-way through a write.
    #[error("i/o error after {written} bytes: {source}")]
    Write {
        written: usize,
        #[source]
        source: io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    /// Bad magic, unsupported rank, or otherwise malformed bytes.
    #[error("format error: {0}")]
    Format(String),
    /// Payload shorter than the header promises.
    #[error("length error: expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("data error: non-finite value at flat index {index}")]
    NonFinite { index: usize },
    /// A required key is missing or malformed in a text schema.
    #[error("schema error at line {line}: {message} (key `{key}`)")]
    Schema {
        key: String,
        line: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("empty linear system")]
    EmptySystem,
    #[error("all weights of the linear system are zero")]
    DegenerateWeights,
    #[error("non-positive depth for points {indices:?}")]
    Projection { indices: Vec<usize> },
    #[error("solver error: {0}")]
    Solver(String),
    /// RANSAC found no hypothesis with enough inliers.
    #[error("no pose hypothesis reached {required} inliers")]
    NoConsensus { required: usize },
    #[error("numeric error: loss part `{part}` is not finite")]
    Numeric { part: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
