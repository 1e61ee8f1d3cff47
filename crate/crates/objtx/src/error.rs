//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors surfaced by any public operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of range or inconsistent with others.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data violates a documented invariant.
    #[error("data error: {0}")]
    Data(String),

    /// A fixed capacity (token cap, slot table) was exceeded.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A file could not be parsed; `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Load {
        path: String,
        line: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_error_carries_path_and_line() {
        let err = Error::Load {
            path: "corpus.jsonl".into(),
            line: 17,
            message: "unknown record kind".into(),
        };
        assert_eq!(err.to_string(), "corpus.jsonl:17: unknown record kind");
    }

    #[test]
    fn usage_errors_exit_two_everything_else_one() {
        assert_eq!(Error::Usage("bad flag".into()).exit_code(), 2);
        assert_eq!(Error::Shape("2x3 vs 4x5".into()).exit_code(), 1);
        assert_eq!(Error::Data("empty span".into()).exit_code(), 1);
    }
}
