//! JSON request and response bodies. Big integers travel as fixed-width
//! lowercase hex.

use ringauth_core::IdentityRef;
use serde::{Deserialize, Serialize};

use crate::idp::IdpToken;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvitationsRequest {
    pub identities: Vec<IdentityRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvitationsResponse {
    pub batch_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareRequest {
    pub tokens: Vec<IdpToken>,
    /// Must equal the current epoch when given; past epochs are refused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareEntry {
    pub provider: String,
    pub user_id: String,
    pub x_hex: String,
    pub y_hex: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareResponse {
    pub server_id: String,
    pub epoch: u64,
    pub shares: Vec<ShareEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PubkeyQuery {
    pub provider: String,
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PubkeyResponse {
    pub server_id: String,
    pub epoch: u64,
    pub provider: String,
    pub user_id: String,
    pub y_hex: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochInfo {
    pub server_id: String,
    pub epoch: u64,
    pub params_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRequest {
    pub provider: String,
    pub user_id: String,
    pub audience: String,
    pub ttl: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeResponse {
    pub challenge_id: String,
    pub nonce: String,
    pub issued_at: u64,
    pub expires_at: u64,
    /// Linkability scope signatures must use.
    pub scope: String,
}

/// One ring member: a single account, or several accounts whose keys are
/// combined into one composite key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RingMember {
    One(IdentityRef),
    Combined(Vec<IdentityRef>),
}

impl RingMember {
    /// Sorts and dedups; a single account collapses to `One`.
    pub fn new(mut ids: Vec<IdentityRef>) -> Option<Self> {
        ids.sort();
        ids.dedup();
        match ids.len() {
            0 => None,
            1 => ids.pop().map(RingMember::One),
            _ => Some(RingMember::Combined(ids)),
        }
    }

    pub fn accounts(&self) -> &[IdentityRef] {
        match self {
            RingMember::One(id) => std::slice::from_ref(id),
            RingMember::Combined(ids) => ids,
        }
    }

    /// Canonical form of `accounts`, used to compare members.
    pub fn normalized(&self) -> Option<Self> {
        RingMember::new(self.accounts().to_vec())
    }
}

impl std::fmt::Display for RingMember {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.accounts().iter().map(|i| i.canonical()).collect();
        f.write_str(&parts.join("+"))
    }
}

impl std::str::FromStr for RingMember {
    type Err = String;

    /// `provider:user` or `provider:user+provider:user`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let ids = s
            .split('+')
            .map(|part| part.trim().parse::<IdentityRef>().map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        RingMember::new(ids).ok_or_else(|| "empty ring member".to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginRequest {
    pub challenge_id: String,
    pub identities: Vec<RingMember>,
    pub sig_hex: String,
    /// Ring members the client signed over. When present the provider
    /// reports `ring_mismatch` if they differ from the directory's keys.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring: Option<Vec<String>>,
}

/// The stored login record and the body of a successful login.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthToken {
    pub token: String,
    pub pseudonym: String,
    pub ring_identities: Vec<RingMember>,
    pub issued_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntrospectQuery {
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Introspection {
    pub pseudonym: String,
    pub ring_identities: Vec<RingMember>,
    pub issued_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudonymRequest {
    pub pseudonym: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
}
