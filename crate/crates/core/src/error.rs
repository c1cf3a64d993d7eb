use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box has non-finite fields {0:?}")]
    NonFinite([f64; 4]),
    #[error("box center ({0}, {1}) outside [0, 1]")]
    CenterOutOfRange(f64, f64),
    #[error("box extent ({0}, {1}) outside [1e-6, 1]")]
    BadExtent(f64, f64),
    #[error("degenerate enclosing area")]
    DegenerateEnclosing,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("out-of-vocabulary word {0:?}")]
    OutOfVocabulary(String),
    #[error("invalid generation parameters: {0}")]
    InvalidSpec(String),
    #[error("could not place objects after {0} attempts")]
    Infeasible(usize),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("requested {queries} queries from {tokens} visual tokens")]
    TooManyQueries { queries: usize, tokens: usize },
    #[error("token id {0} outside the vocabulary")]
    InvalidToken(usize),
    #[error("empty proposal set")]
    EmptyProposals,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("{name} must be finite and non-negative, got {value}")]
    InvalidScalar { name: &'static str, value: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("empty IoU list")]
    Empty,
    #[error("missing prediction for {0}")]
    MissingPrediction(String),
}

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("adapter {adapter} failed on frame {frame}: {reason}")]
    Adapter {
        adapter: String,
        frame: usize,
        reason: String,
    },
    #[error("unknown adapter {0:?}")]
    UnknownAdapter(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match model: {0}")]
    Incompatible(String),
}

/// Top-level error for orchestration code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
