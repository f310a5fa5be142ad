//! Error taxonomy shared by every subsystem.
//!
//! Variants map onto process exit codes (see [`Error::exit_code`]):
//! configuration/usage problems exit 2, data and file-format problems exit 3,
//! numeric failures exit 4.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad dimensions, out-of-range hyperparameters,
    /// malformed config documents.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data fed to an otherwise well-configured operation
    /// (out-of-range labels, degenerate vectors, mismatched pairs).
    #[error("data error: {0}")]
    Data(String),

    /// Corrupt or truncated on-disk artifact. `offset` is the byte position
    /// at which the problem was detected.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Non-finite value produced by a tape operation; `node` identifies the
    /// offending node in the recorded computation.
    #[error("numeric error at node {node} ({op}): {message}")]
    Numeric {
        node: usize,
        op: &'static str,
        message: String,
    },

    /// API misuse: calling operations out of order or on empty inputs.
    #[error("usage error: {0}")]
    Usage(String),

    /// Invariant violated by internal state; indicates a bug upstream.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for CLI surfaces: 0 success, 2 configuration,
    /// 3 data/format, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Json(_) => 3,
            Error::Numeric { .. } | Error::Internal(_) => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_cli_contract() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Usage("x".into()).exit_code(), 2);
        assert_eq!(Error::Data("x".into()).exit_code(), 3);
        assert_eq!(
            Error::Format {
                offset: 0,
                message: "x".into()
            }
            .exit_code(),
            3
        );
        assert_eq!(
            Error::Numeric {
                node: 0,
                op: "add",
                message: "x".into()
            }
            .exit_code(),
            4
        );
    }
}
