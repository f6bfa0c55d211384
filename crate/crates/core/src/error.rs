//! One error type for the whole crate, with a variant per failure category.

use thiserror::Error;

/// Crate-wide error. Variants are grouped by what went wrong, not where:
/// shape and contract errors are programming mistakes surfaced loudly,
/// parse/data/format errors come from files the user handed us.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible; names both sides.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared where finite math was required.
    #[error("numeric error in {tensor}: {detail}")]
    Numeric { tensor: String, detail: String },

    /// A text input could not be parsed; line numbers are 1-based.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// Inputs parsed but their content is unusable.
    #[error("data error: {0}")]
    Data(String),

    /// A binary artifact is malformed or truncated.
    #[error("format error: {0}")]
    Format(String),

    /// A binary artifact was written by an incompatible release.
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
