//! Wire-level error codes shared by every service and client.

use std::fmt;
use std::str::FromStr;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stable error codes. The string forms are part of the HTTP API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    BadRequest,
    InvalidIdentity,
    UnknownProvider,
    BadMac,
    AudienceMismatch,
    TokenExpired,
    NameMismatch,
    DuplicateIdentity,
    EmptyRequest,
    RateLimited,
    EpochExpired,
    FutureEpoch,
    UnknownArchivedKey,
    Forbidden,
    UnknownChallenge,
    ChallengeExpired,
    ChallengeConsumed,
    MalformedSignature,
    SignatureInvalid,
    RingMismatch,
    ScopeMismatch,
    PseudonymBlocked,
    KeyServerUnreachable,
    KeyServerError,
    UnknownToken,
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 26] = [
        ErrorCode::BadRequest,
        ErrorCode::InvalidIdentity,
        ErrorCode::UnknownProvider,
        ErrorCode::BadMac,
        ErrorCode::AudienceMismatch,
        ErrorCode::TokenExpired,
        ErrorCode::NameMismatch,
        ErrorCode::DuplicateIdentity,
        ErrorCode::EmptyRequest,
        ErrorCode::RateLimited,
        ErrorCode::EpochExpired,
        ErrorCode::FutureEpoch,
        ErrorCode::UnknownArchivedKey,
        ErrorCode::Forbidden,
        ErrorCode::UnknownChallenge,
        ErrorCode::ChallengeExpired,
        ErrorCode::ChallengeConsumed,
        ErrorCode::MalformedSignature,
        ErrorCode::SignatureInvalid,
        ErrorCode::RingMismatch,
        ErrorCode::ScopeMismatch,
        ErrorCode::PseudonymBlocked,
        ErrorCode::KeyServerUnreachable,
        ErrorCode::KeyServerError,
        ErrorCode::UnknownToken,
        ErrorCode::Internal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::BadRequest => "bad_request",
            ErrorCode::InvalidIdentity => "invalid_identity",
            ErrorCode::UnknownProvider => "unknown_provider",
            ErrorCode::BadMac => "bad_mac",
            ErrorCode::AudienceMismatch => "audience_mismatch",
            ErrorCode::TokenExpired => "token_expired",
            ErrorCode::NameMismatch => "name_mismatch",
            ErrorCode::DuplicateIdentity => "duplicate_identity",
            ErrorCode::EmptyRequest => "empty_request",
            ErrorCode::RateLimited => "rate_limited",
            ErrorCode::EpochExpired => "epoch_expired",
            ErrorCode::FutureEpoch => "future_epoch",
            ErrorCode::UnknownArchivedKey => "unknown_archived_key",
            ErrorCode::Forbidden => "forbidden",
            ErrorCode::UnknownChallenge => "unknown_challenge",
            ErrorCode::ChallengeExpired => "challenge_expired",
            ErrorCode::ChallengeConsumed => "challenge_consumed",
            ErrorCode::MalformedSignature => "malformed_signature",
            ErrorCode::SignatureInvalid => "signature_invalid",
            ErrorCode::RingMismatch => "ring_mismatch",
            ErrorCode::ScopeMismatch => "scope_mismatch",
            ErrorCode::PseudonymBlocked => "pseudonym_blocked",
            ErrorCode::KeyServerUnreachable => "key_server_unreachable",
            ErrorCode::KeyServerError => "key_server_error",
            ErrorCode::UnknownToken => "unknown_token",
            ErrorCode::Internal => "internal",
        }
    }

    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::BadMac
            | ErrorCode::AudienceMismatch
            | ErrorCode::TokenExpired
            | ErrorCode::SignatureInvalid
            | ErrorCode::RingMismatch
            | ErrorCode::ScopeMismatch => StatusCode::UNAUTHORIZED,
            ErrorCode::PseudonymBlocked | ErrorCode::Forbidden | ErrorCode::NameMismatch => {
                StatusCode::FORBIDDEN
            }
            ErrorCode::RateLimited => StatusCode::TOO_MANY_REQUESTS,
            ErrorCode::UnknownArchivedKey | ErrorCode::UnknownChallenge | ErrorCode::UnknownToken => {
                StatusCode::NOT_FOUND
            }
            ErrorCode::EpochExpired | ErrorCode::ChallengeExpired | ErrorCode::ChallengeConsumed => {
                StatusCode::GONE
            }
            ErrorCode::KeyServerUnreachable | ErrorCode::KeyServerError => StatusCode::BAD_GATEWAY,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorCode::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown error code {s:?}"))
    }
}

/// `{"error": code, "detail": text}`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

/// An error produced by a service operation, carrying its wire code.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{code}: {detail}")]
pub struct ServiceError {
    pub code: ErrorCode,
    pub detail: String,
}

impl ServiceError {
    pub fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        ServiceError {
            code,
            detail: detail.into(),
        }
    }

    pub fn internal(detail: impl fmt::Display) -> Self {
        ServiceError::new(ErrorCode::Internal, detail.to_string())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code.as_str().to_string(),
            detail: self.detail,
        };
        (self.code.status(), Json(body)).into_response()
    }
}

impl From<ringauth_core::KeyError> for ServiceError {
    fn from(e: ringauth_core::KeyError) -> Self {
        use ringauth_core::KeyError as K;
        let code = match &e {
            K::InvalidIdentity(_) => ErrorCode::InvalidIdentity,
            K::EpochExpired { .. } => ErrorCode::EpochExpired,
            K::FutureEpoch { .. } => ErrorCode::FutureEpoch,
            K::UnknownArchivedKey { .. } => ErrorCode::UnknownArchivedKey,
            K::EmptyShares => ErrorCode::EmptyRequest,
            _ => ErrorCode::Internal,
        };
        ServiceError::new(code, e.to_string())
    }
}

/// Failure talking to a service, as seen by a client.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("{target} rejected the request: {code}: {detail}")]
    Api {
        target: String,
        code: ErrorCode,
        detail: String,
    },
    #[error("{target} is unreachable: {detail}")]
    Unreachable { target: String, detail: String },
    #[error("unexpected response from {target}: {detail}")]
    Protocol { target: String, detail: String },
}

impl ClientError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Api { code, .. } => Some(*code),
            _ => None,
        }
    }

    pub fn from_service(target: impl Into<String>, e: ServiceError) -> Self {
        ClientError::Api {
            target: target.into(),
            code: e.code,
            detail: e.detail,
        }
    }
}
