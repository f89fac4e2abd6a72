//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Result alias used throughout the core crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by tensor ops, the feature frontend, training and data
/// handling.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes or dimensions do not satisfy an op's contract.
    Dimension(String),
    /// Malformed input data (empty waveform, empty corpus, ...).
    Input(String),
    /// Bad label data: malformed one-hot row, out-of-range raw rating,
    /// missing label on a source record.
    Label(String),
    /// Manifest parse/validation failure, pointing at the offending row
    /// (1-based, counting the header as row 1).
    Manifest { row: usize, message: String },
    /// Batch (or half-batch) too small to compute batch statistics.
    DegenerateBatch(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Data-level problem: empty domain, class with too few records, ...
    Data(String),
    /// A metric is undefined for the given inputs (e.g. a class absent
    /// from the reference labels).
    Metric(String),
    /// API misuse (e.g. backward from a non-scalar loss).
    Usage(String),
    /// Training aborted on a non-finite loss.
    NanAbort { epoch: usize, batch: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Label(m) => write!(f, "label error: {m}"),
            Error::Manifest { row, message } => write!(f, "manifest error at row {row}: {message}"),
            Error::DegenerateBatch(m) => write!(f, "degenerate batch: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Metric(m) => write!(f, "metric error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::NanAbort { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}; aborting")
            }
        }
    }
}

impl core::error::Error for Error {}
