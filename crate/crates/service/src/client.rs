//! Clients for the key server, mock provider and auth provider APIs.
//!
//! `KeyServerApi` has two implementations: HTTP, and a direct in-process
//! handle used by tests and the local harness.

use std::sync::Arc;

use async_trait::async_trait;
use rand::rngs::OsRng;
use reqwest::{Client, RequestBuilder};
use ringauth_core::{IdentityRef, MasterSecret};
use serde::de::DeserializeOwned;

use crate::error::{ClientError, ErrorBody, ErrorCode, ServiceError};
use crate::idp::IdpToken;
use crate::keyserver::KeyServer;
use crate::wire::{
    Ack, AuthToken, ChallengeResponse, EpochInfo, InvitationsRequest, InvitationsResponse,
    Introspection, LoginRequest, PseudonymRequest, PubkeyResponse, ShareRequest, ShareResponse,
    TokenRequest,
};

#[async_trait]
pub trait KeyServerApi: Send + Sync {
    /// Human-readable name for error messages.
    fn label(&self) -> String;
    async fn epoch_info(&self) -> Result<EpochInfo, ClientError>;
    async fn public_share(
        &self,
        identity: &IdentityRef,
        epoch: Option<u64>,
    ) -> Result<PubkeyResponse, ClientError>;
    async fn private_shares_at(
        &self,
        tokens: Vec<IdpToken>,
        epoch: Option<u64>,
    ) -> Result<ShareResponse, ClientError>;
    async fn private_shares(&self, tokens: Vec<IdpToken>) -> Result<ShareResponse, ClientError> {
        self.private_shares_at(tokens, None).await
    }
    async fn request_invitations(
        &self,
        identities: Vec<IdentityRef>,
    ) -> Result<InvitationsResponse, ClientError>;
    async fn rotate(&self) -> Result<EpochInfo, ClientError>;
}

fn blocking_failed(target: &str, e: tokio::task::JoinError) -> ClientError {
    ClientError::Protocol {
        target: target.to_string(),
        detail: e.to_string(),
    }
}

#[async_trait]
impl KeyServerApi for Arc<KeyServer> {
    fn label(&self) -> String {
        self.server_id().to_string()
    }

    async fn epoch_info(&self) -> Result<EpochInfo, ClientError> {
        Ok(KeyServer::epoch_info(self))
    }

    async fn public_share(
        &self,
        identity: &IdentityRef,
        epoch: Option<u64>,
    ) -> Result<PubkeyResponse, ClientError> {
        let ks = Arc::clone(self);
        let identity = identity.clone();
        let label = self.label();
        tokio::task::spawn_blocking(move || ks.get_public_share(&identity, epoch))
            .await
            .map_err(|e| blocking_failed(&label, e))?
            .map_err(|e| ClientError::from_service(label, e))
    }

    async fn private_shares_at(
        &self,
        tokens: Vec<IdpToken>,
        epoch: Option<u64>,
    ) -> Result<ShareResponse, ClientError> {
        let ks = Arc::clone(self);
        let label = self.label();
        tokio::task::spawn_blocking(move || ks.get_private_share_at(&tokens, epoch))
            .await
            .map_err(|e| blocking_failed(&label, e))?
            .map_err(|e| ClientError::from_service(label, e))
    }

    async fn request_invitations(
        &self,
        identities: Vec<IdentityRef>,
    ) -> Result<InvitationsResponse, ClientError> {
        KeyServer::request_invitations(self, &identities)
            .map_err(|e| ClientError::from_service(self.label(), e))
    }

    async fn rotate(&self) -> Result<EpochInfo, ClientError> {
        KeyServer::rotate(self, MasterSecret::random(&mut OsRng))
            .map_err(|e| ClientError::from_service(self.label(), e))
    }
}

async fn send<T: DeserializeOwned>(target: &str, req: RequestBuilder) -> Result<T, ClientError> {
    let resp = req.send().await.map_err(|e| ClientError::Unreachable {
        target: target.to_string(),
        detail: e.to_string(),
    })?;
    let status = resp.status();
    let body = resp.bytes().await.map_err(|e| ClientError::Unreachable {
        target: target.to_string(),
        detail: e.to_string(),
    })?;
    let protocol = |detail: String| ClientError::Protocol {
        target: target.to_string(),
        detail,
    };
    if status.is_success() {
        return serde_json::from_slice(&body).map_err(|e| protocol(e.to_string()));
    }
    let err: ErrorBody = serde_json::from_slice(&body)
        .map_err(|_| protocol(format!("HTTP {status}: {}", String::from_utf8_lossy(&body))))?;
    let code: ErrorCode = err.error.parse().map_err(protocol)?;
    Err(ClientError::from_service(
        target,
        ServiceError::new(code, err.detail),
    ))
}

fn trim(base: &str) -> String {
    base.trim_end_matches('/').to_string()
}

fn http() -> Client {
    Client::builder()
        .timeout(std::time::Duration::from_secs(30))
        .build()
        .expect("HTTP client builds")
}

/// Key server reached over HTTP.
#[derive(Debug, Clone)]
pub struct HttpKeyServer {
    base: String,
    client: Client,
}

impl HttpKeyServer {
    pub fn new(base: &str) -> Self {
        HttpKeyServer {
            base: trim(base),
            client: http(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }
}

#[async_trait]
impl KeyServerApi for HttpKeyServer {
    fn label(&self) -> String {
        self.base.clone()
    }

    async fn epoch_info(&self) -> Result<EpochInfo, ClientError> {
        send(&self.base, self.client.get(format!("{}/epoch", self.base))).await
    }

    async fn public_share(
        &self,
        identity: &IdentityRef,
        epoch: Option<u64>,
    ) -> Result<PubkeyResponse, ClientError> {
        let mut query = vec![
            ("provider", identity.provider.clone()),
            ("user_id", identity.user_id.clone()),
        ];
        if let Some(e) = epoch {
            query.push(("epoch", e.to_string()));
        }
        let req = self
            .client
            .get(format!("{}/pubkey", self.base))
            .query(&query);
        send(&self.base, req).await
    }

    async fn private_shares_at(
        &self,
        tokens: Vec<IdpToken>,
        epoch: Option<u64>,
    ) -> Result<ShareResponse, ClientError> {
        let req = self
            .client
            .post(format!("{}/share", self.base))
            .json(&ShareRequest { tokens, epoch });
        send(&self.base, req).await
    }

    async fn request_invitations(
        &self,
        identities: Vec<IdentityRef>,
    ) -> Result<InvitationsResponse, ClientError> {
        let req = self
            .client
            .post(format!("{}/invitations", self.base))
            .json(&InvitationsRequest { identities });
        send(&self.base, req).await
    }

    async fn rotate(&self) -> Result<EpochInfo, ClientError> {
        send(&self.base, self.client.post(format!("{}/rotate", self.base))).await
    }
}

/// Mock identity provider reached over HTTP.
#[derive(Debug, Clone)]
pub struct HttpIdp {
    base: String,
    client: Client,
}

impl HttpIdp {
    pub fn new(base: &str) -> Self {
        HttpIdp {
            base: trim(base),
            client: http(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub async fn token(&self, req: &TokenRequest) -> Result<IdpToken, ClientError> {
        send(
            &self.base,
            self.client.post(format!("{}/token", self.base)).json(req),
        )
        .await
    }
}

/// Auth provider reached over HTTP.
#[derive(Debug, Clone)]
pub struct HttpAuth {
    base: String,
    client: Client,
}

impl HttpAuth {
    pub fn new(base: &str) -> Self {
        HttpAuth {
            base: trim(base),
            client: http(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub async fn challenge(&self) -> Result<ChallengeResponse, ClientError> {
        send(&self.base, self.client.get(format!("{}/challenge", self.base))).await
    }

    pub async fn login(&self, req: &LoginRequest) -> Result<AuthToken, ClientError> {
        send(
            &self.base,
            self.client.post(format!("{}/login", self.base)).json(req),
        )
        .await
    }

    pub async fn introspect(&self, token: &str) -> Result<Introspection, ClientError> {
        let req = self
            .client
            .get(format!("{}/introspect", self.base))
            .query(&[("token", token)]);
        send(&self.base, req).await
    }

    pub async fn block(&self, pseudonym: &str) -> Result<Ack, ClientError> {
        self.admin("block", pseudonym).await
    }

    pub async fn unblock(&self, pseudonym: &str) -> Result<Ack, ClientError> {
        self.admin("unblock", pseudonym).await
    }

    async fn admin(&self, action: &str, pseudonym: &str) -> Result<Ack, ClientError> {
        let req = self
            .client
            .post(format!("{}/admin/{action}", self.base))
            .json(&PseudonymRequest {
                pseudonym: pseudonym.to_string(),
            });
        send(&self.base, req).await
    }
}
