use std::path::PathBuf;

use ringauth_service::{ClientError, ErrorCode};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("server inconsistency at {server}: {detail}")]
    ServerInconsistency { server: String, detail: String },
    #[error("key servers disagree on the epoch: {0}")]
    EpochSkew(String),
    #[error("you are not in your own anonymity set")]
    NotInRing,
    #[error("signature rejected: {0}")]
    Rejected(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("{0}")]
    Crypto(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code. Service rejections map to 20 plus the code's
    /// position in `ErrorCode::ALL`.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Config(_) => 3,
            CliError::Client(ClientError::Unreachable { .. }) => 4,
            CliError::Client(ClientError::Protocol { .. }) => 5,
            CliError::Client(ClientError::Api { code, .. }) => service_exit_code(*code),
            CliError::ServerInconsistency { .. } => 6,
            CliError::EpochSkew(_) => 7,
            CliError::NotInRing => 8,
            CliError::Rejected(_) => 9,
            CliError::Malformed(_) => 10,
            CliError::Crypto(_) => 11,
        }
    }

    /// Wire code of a service rejection, if this is one.
    pub fn service_code(&self) -> Option<ErrorCode> {
        match self {
            CliError::Client(c) => c.code(),
            _ => None,
        }
    }
}

pub fn service_exit_code(code: ErrorCode) -> i32 {
    let idx = ErrorCode::ALL
        .iter()
        .position(|c| *c == code)
        .expect("every code is listed");
    20 + idx as i32
}

impl From<ringauth_core::GroupError> for CliError {
    fn from(e: ringauth_core::GroupError) -> Self {
        CliError::Malformed(e.to_string())
    }
}

impl From<ringauth_core::KeyError> for CliError {
    fn from(e: ringauth_core::KeyError) -> Self {
        CliError::Crypto(e.to_string())
    }
}

impl From<ringauth_core::LrsError> for CliError {
    fn from(e: ringauth_core::LrsError) -> Self {
        CliError::Crypto(e.to_string())
    }
}
