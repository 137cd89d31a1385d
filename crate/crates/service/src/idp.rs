//! Mock identity providers.
//!
//! A provider mints tokens that name one account and one audience (the key
//! server the token is meant for), authenticated with HMAC-SHA-256 under the
//! provider's secret. Key servers hold the same secrets and verify tokens
//! locally.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use hmac::{Hmac, Mac};
use ringauth_core::IdentityRef;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::clock::Clock;
use crate::error::{ErrorCode, ServiceError};
use crate::wire::TokenRequest;

/// A provider-issued, audience-bound access token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdpToken {
    pub provider: String,
    pub user_id: String,
    pub display_name: String,
    pub audience: String,
    pub expiry: u64,
    /// Hex HMAC-SHA-256 over the canonical JSON of the fields above.
    pub mac: String,
}

// Field order here is the canonical order the MAC covers.
#[derive(Serialize)]
struct Claims<'a> {
    provider: &'a str,
    user_id: &'a str,
    display_name: &'a str,
    audience: &'a str,
    expiry: u64,
}

impl IdpToken {
    fn claims_json(&self) -> Vec<u8> {
        serde_json::to_vec(&Claims {
            provider: &self.provider,
            user_id: &self.user_id,
            display_name: &self.display_name,
            audience: &self.audience,
            expiry: self.expiry,
        })
        .expect("claims serialize")
    }
}

fn mac_for(secret: &[u8], claims: &[u8]) -> Hmac<Sha256> {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("any key length");
    mac.update(claims);
    mac
}

/// Provider name to HMAC secret.
#[derive(Clone, Default)]
pub struct ProviderSecrets(BTreeMap<String, Vec<u8>>);

impl std::fmt::Debug for ProviderSecrets {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.0.keys()).finish()
    }
}

impl ProviderSecrets {
    pub fn new() -> Self {
        ProviderSecrets::default()
    }

    pub fn insert(&mut self, provider: impl Into<String>, secret: Vec<u8>) {
        self.0.insert(provider.into(), secret);
    }

    pub fn from_hex_map(map: &BTreeMap<String, String>) -> Result<Self, ServiceError> {
        let mut out = ProviderSecrets::new();
        for (name, hex_secret) in map {
            let secret = hex::decode(hex_secret).map_err(|e| {
                ServiceError::new(ErrorCode::BadRequest, format!("secret for {name}: {e}"))
            })?;
            out.insert(name.clone(), secret);
        }
        Ok(out)
    }

    pub fn get(&self, provider: &str) -> Option<&[u8]> {
        self.0.get(provider).map(Vec::as_slice)
    }

    pub fn providers(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

pub fn issue_token(
    secrets: &ProviderSecrets,
    provider: &str,
    user_id: &str,
    display_name: &str,
    audience: &str,
    ttl: u64,
    now: u64,
) -> Result<IdpToken, ServiceError> {
    let secret = secrets.get(provider).ok_or_else(|| {
        ServiceError::new(ErrorCode::UnknownProvider, format!("provider {provider:?}"))
    })?;
    IdentityRef::new(provider, user_id)?;
    let mut token = IdpToken {
        provider: provider.to_string(),
        user_id: user_id.to_string(),
        display_name: display_name.to_string(),
        audience: audience.to_string(),
        expiry: now.saturating_add(ttl),
        mac: String::new(),
    };
    let mac = mac_for(secret, &token.claims_json()).finalize().into_bytes();
    token.mac = hex::encode(mac);
    Ok(token)
}

/// Checks provider, MAC, audience and expiry, in that order.
pub fn verify_token(
    secrets: &ProviderSecrets,
    token: &IdpToken,
    expected_audience: &str,
    now: u64,
) -> Result<IdentityRef, ServiceError> {
    let secret = secrets.get(&token.provider).ok_or_else(|| {
        ServiceError::new(
            ErrorCode::UnknownProvider,
            format!("provider {:?}", token.provider),
        )
    })?;
    let tag = hex::decode(&token.mac).unwrap_or_default();
    mac_for(secret, &token.claims_json())
        .verify_slice(&tag)
        .map_err(|_| ServiceError::new(ErrorCode::BadMac, "token MAC does not verify"))?;
    if token.audience != expected_audience {
        return Err(ServiceError::new(
            ErrorCode::AudienceMismatch,
            format!(
                "token is bound to {:?}, not {:?}",
                token.audience, expected_audience
            ),
        ));
    }
    if token.expiry <= now {
        return Err(ServiceError::new(
            ErrorCode::TokenExpired,
            format!("token expired at {}", token.expiry),
        ));
    }
    Ok(IdentityRef::new(&token.provider, &token.user_id)?)
}

fn default_listen() -> String {
    "127.0.0.1:0".into()
}

/// Config file for a mock provider service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdpConfig {
    /// Provider name to hex HMAC secret.
    pub providers: BTreeMap<String, String>,
    /// user_id to display name.
    #[serde(default)]
    pub display_names: BTreeMap<String, String>,
    #[serde(default = "default_listen")]
    pub listen: String,
}

/// A mock provider service hosting one or more providers.
pub struct MockIdp {
    secrets: ProviderSecrets,
    display_names: BTreeMap<String, String>,
    clock: Arc<dyn Clock>,
}

impl MockIdp {
    pub fn new(
        secrets: ProviderSecrets,
        display_names: BTreeMap<String, String>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        MockIdp {
            secrets,
            display_names,
            clock,
        }
    }

    /// Mints a token. The mock performs no user authentication.
    pub fn token(&self, req: &TokenRequest) -> Result<IdpToken, ServiceError> {
        let display = req
            .display_name
            .clone()
            .or_else(|| self.display_names.get(&req.user_id).cloned())
            .unwrap_or_else(|| req.user_id.clone());
        issue_token(
            &self.secrets,
            &req.provider,
            &req.user_id,
            &display,
            &req.audience,
            req.ttl,
            self.clock.now(),
        )
    }

    pub fn router(self: Arc<Self>) -> Router {
        Router::new()
            .route("/token", post(token_handler))
            .with_state(self)
    }
}

async fn token_handler(
    State(idp): State<Arc<MockIdp>>,
    Json(req): Json<TokenRequest>,
) -> Result<Json<IdpToken>, ServiceError> {
    idp.token(&req).map(Json)
}
