//! Anonymous login provider.
//!
//! Users prove membership in an anonymity set by ring-signing a challenge
//! nonce. The ring is rebuilt here from the key servers' directories, never
//! taken from the client. The linkage tag under the service's fixed scope is
//! hashed into a stable pseudonym, which is what gets tokens and blocks.

use std::collections::{BTreeSet, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{ConnectInfo, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::future::try_join_all;
use rand::rngs::OsRng;
use rand::RngCore;
use ringauth_core::{keyshare, lrs, GroupElement, GroupParams, LrsError, Ring};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::KeyServerApi;
use crate::clock::Clock;
use crate::error::{ClientError, ErrorCode, ServiceError};
use crate::keyserver::ensure_local;
use crate::wire::{
    Ack, AuthToken, ChallengeResponse, IntrospectQuery, Introspection, LoginRequest,
    PseudonymRequest, RingMember,
};

fn default_listen() -> String {
    "127.0.0.1:0".into()
}
fn default_ttl() -> u64 {
    300
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthConfig {
    pub service_name: String,
    /// Linkability scope; `auth:<service_name>` when absent.
    #[serde(default)]
    pub scope: Option<String>,
    /// Base URLs of every key server.
    pub key_servers: Vec<String>,
    #[serde(default = "default_ttl")]
    pub challenge_ttl: u64,
    #[serde(default)]
    pub params_path: Option<PathBuf>,
    #[serde(default)]
    pub token_log: Option<PathBuf>,
    #[serde(default)]
    pub block_log: Option<PathBuf>,
    #[serde(default = "default_listen")]
    pub listen: String,
}

impl AuthConfig {
    pub fn new(service_name: impl Into<String>, key_servers: Vec<String>) -> Self {
        AuthConfig {
            service_name: service_name.into(),
            scope: None,
            key_servers,
            challenge_ttl: default_ttl(),
            params_path: None,
            token_log: None,
            block_log: None,
            listen: default_listen(),
        }
    }

    pub fn effective_scope(&self) -> String {
        self.scope
            .clone()
            .unwrap_or_else(|| format!("auth:{}", self.service_name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Challenge {
    nonce: [u8; 32],
    issued_at: u64,
    expires_at: u64,
    consumed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
enum TokenLogEntry {
    Issue(AuthToken),
    Revoke { pseudonym: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
enum BlockLogEntry {
    Block { pseudonym: String },
    Unblock { pseudonym: String },
}

/// SHA-256 of the encoded linkage tag, lowercase hex.
pub fn pseudonym(tag: &GroupElement, params: &GroupParams) -> String {
    hex::encode(Sha256::digest(params.encode_element(tag)))
}

fn is_pseudonym(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn append_line<T: Serialize>(path: &Path, entry: &T) -> Result<(), ServiceError> {
    let mut line = serde_json::to_string(entry).map_err(ServiceError::internal)?;
    line.push('\n');
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| f.write_all(line.as_bytes()))
        .map_err(|e| ServiceError::internal(format!("{}: {e}", path.display())))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ServiceError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let body = std::fs::read_to_string(path)
        .map_err(|e| ServiceError::internal(format!("{}: {e}", path.display())))?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| ServiceError::internal(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn key_server_failure(e: ClientError) -> ServiceError {
    match e {
        ClientError::Unreachable { .. } => {
            ServiceError::new(ErrorCode::KeyServerUnreachable, e.to_string())
        }
        _ => ServiceError::new(ErrorCode::KeyServerError, e.to_string()),
    }
}

pub struct AuthProvider {
    config: AuthConfig,
    scope: Vec<u8>,
    params: GroupParams,
    servers: Vec<Arc<dyn KeyServerApi>>,
    clock: Arc<dyn Clock>,
    challenges: Mutex<HashMap<String, Challenge>>,
    tokens: RwLock<HashMap<String, AuthToken>>,
    blocked: RwLock<BTreeSet<String>>,
    // Serializes log appends with the in-memory updates they describe.
    writer: Mutex<()>,
}

impl AuthProvider {
    /// Replays the token and block logs if configured.
    pub fn open(
        config: AuthConfig,
        params: GroupParams,
        servers: Vec<Arc<dyn KeyServerApi>>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        if servers.is_empty() {
            return Err(ServiceError::new(
                ErrorCode::BadRequest,
                "at least one key server is required",
            ));
        }
        let mut blocked = BTreeSet::new();
        if let Some(path) = &config.block_log {
            for entry in read_lines::<BlockLogEntry>(path)? {
                match entry {
                    BlockLogEntry::Block { pseudonym } => blocked.insert(pseudonym),
                    BlockLogEntry::Unblock { pseudonym } => blocked.remove(&pseudonym),
                };
            }
        }
        let mut tokens = HashMap::new();
        if let Some(path) = &config.token_log {
            for entry in read_lines::<TokenLogEntry>(path)? {
                match entry {
                    TokenLogEntry::Issue(t) => {
                        tokens.insert(t.token.clone(), t);
                    }
                    TokenLogEntry::Revoke { pseudonym } => {
                        tokens.retain(|_, t: &mut AuthToken| t.pseudonym != pseudonym)
                    }
                }
            }
        }
        Ok(AuthProvider {
            scope: config.effective_scope().into_bytes(),
            config,
            params,
            servers,
            clock,
            challenges: Mutex::new(HashMap::new()),
            tokens: RwLock::new(tokens),
            blocked: RwLock::new(blocked),
            writer: Mutex::new(()),
        })
    }

    pub fn scope(&self) -> &[u8] {
        &self.scope
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn config(&self) -> &AuthConfig {
        &self.config
    }

    pub fn create_challenge(&self) -> ChallengeResponse {
        let now = self.clock.now();
        let mut id = [0u8; 16];
        let mut nonce = [0u8; 32];
        OsRng.fill_bytes(&mut id);
        OsRng.fill_bytes(&mut nonce);
        let challenge = Challenge {
            nonce,
            issued_at: now,
            expires_at: now + self.config.challenge_ttl,
            consumed: false,
        };
        let mut all = self.challenges.lock().expect("lock");
        all.retain(|_, c| c.expires_at > now);
        let id = hex::encode(id);
        all.insert(id.clone(), challenge.clone());
        ChallengeResponse {
            challenge_id: id,
            nonce: hex::encode(nonce),
            issued_at: challenge.issued_at,
            expires_at: challenge.expires_at,
            scope: self.config.effective_scope(),
        }
    }

    /// True while the challenge is stored and unexpired.
    pub fn challenge_live(&self, id: &str) -> bool {
        let now = self.clock.now();
        let mut all = self.challenges.lock().expect("lock");
        all.retain(|_, c| c.expires_at > now);
        all.contains_key(id)
    }

    fn usable_challenge(&self, id: &str) -> Result<[u8; 32], ServiceError> {
        let now = self.clock.now();
        let mut all = self.challenges.lock().expect("lock");
        let c = all
            .get(id)
            .ok_or_else(|| ServiceError::new(ErrorCode::UnknownChallenge, "no such challenge"))?;
        if c.expires_at <= now {
            all.remove(id);
            return Err(ServiceError::new(
                ErrorCode::ChallengeExpired,
                "challenge expired",
            ));
        }
        if c.consumed {
            return Err(ServiceError::new(
                ErrorCode::ChallengeConsumed,
                "challenge already used",
            ));
        }
        Ok(c.nonce)
    }

    // The check-and-set that decides which of two racing logins wins.
    fn consume_challenge(&self, id: &str) -> Result<(), ServiceError> {
        let now = self.clock.now();
        let mut all = self.challenges.lock().expect("lock");
        match all.get_mut(id) {
            None => Err(ServiceError::new(
                ErrorCode::UnknownChallenge,
                "no such challenge",
            )),
            Some(c) if c.expires_at <= now => Err(ServiceError::new(
                ErrorCode::ChallengeExpired,
                "challenge expired",
            )),
            Some(c) if c.consumed => Err(ServiceError::new(
                ErrorCode::ChallengeConsumed,
                "challenge already used",
            )),
            Some(c) => {
                c.consumed = true;
                Ok(())
            }
        }
    }

    /// Fetches every account's public share from every key server and
    /// multiplies them into one key per member.
    pub async fn member_keys(
        &self,
        members: &[RingMember],
    ) -> Result<Vec<GroupElement>, ServiceError> {
        let per_member = members.iter().map(|m| async move {
            let fetches = m
                .accounts()
                .iter()
                .flat_map(|id| self.servers.iter().map(move |s| s.public_share(id, None)));
            let responses = try_join_all(fetches).await.map_err(key_server_failure)?;
            let shares = responses
                .iter()
                .map(|r| self.params.element_from_hex(&r.y_hex))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ServiceError::new(ErrorCode::KeyServerError, e.to_string()))?;
            Ok::<_, ServiceError>(keyshare::combine_public(&shares, &self.params)?)
        });
        try_join_all(per_member).await
    }

    pub async fn verify_login(&self, req: &LoginRequest) -> Result<AuthToken, ServiceError> {
        let nonce = self.usable_challenge(&req.challenge_id)?;

        let raw = hex::decode(&req.sig_hex)
            .map_err(|e| ServiceError::new(ErrorCode::MalformedSignature, e.to_string()))?;
        let sig = lrs::decode(&raw, &self.params)
            .map_err(|e| ServiceError::new(ErrorCode::MalformedSignature, e.to_string()))?;
        if sig.scope != self.scope {
            return Err(ServiceError::new(
                ErrorCode::ScopeMismatch,
                format!("signature scope must be {:?}", self.config.effective_scope()),
            ));
        }

        let mut members = Vec::with_capacity(req.identities.len());
        for m in &req.identities {
            let m = m
                .normalized()
                .ok_or_else(|| ServiceError::new(ErrorCode::BadRequest, "empty ring member"))?;
            members.push(m);
        }
        members.sort();
        if members.is_empty() {
            return Err(ServiceError::new(ErrorCode::BadRequest, "empty ring"));
        }
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(ServiceError::new(
                ErrorCode::BadRequest,
                "ring lists a member twice",
            ));
        }

        let keys = self.member_keys(&members).await?;
        let ring = Ring::new(keys, &self.params).map_err(|e| match e {
            LrsError::DuplicateMember => ServiceError::new(
                ErrorCode::BadRequest,
                "two ring members resolve to the same key",
            ),
            other => ServiceError::internal(other),
        })?;

        if let Some(hint) = &req.ring {
            let mut claimed = hint
                .iter()
                .map(|h| self.params.element_from_hex(h))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ServiceError::new(ErrorCode::RingMismatch, e.to_string()))?;
            claimed.sort();
            if claimed != ring.members() {
                return Err(ServiceError::new(
                    ErrorCode::RingMismatch,
                    "signed ring differs from the key servers' directory",
                ));
            }
        }
        if sig.s.len() != ring.len() {
            return Err(ServiceError::new(
                ErrorCode::RingMismatch,
                format!(
                    "signature covers {} members, ring has {}",
                    sig.s.len(),
                    ring.len()
                ),
            ));
        }

        let params = self.params.clone();
        let outcome = tokio::task::spawn_blocking(move || lrs::verify(&nonce, &ring, &sig, &params))
            .await
            .map_err(ServiceError::internal)?
            .map_err(|e| ServiceError::new(ErrorCode::MalformedSignature, e.to_string()))?;
        let tag = match (outcome.accepted, outcome.tag) {
            (true, Some(tag)) => tag,
            _ => {
                return Err(ServiceError::new(
                    ErrorCode::SignatureInvalid,
                    "ring signature does not verify",
                ))
            }
        };

        self.consume_challenge(&req.challenge_id)?;
        let pseudonym = pseudonym(&tag, &self.params);
        if self.is_blocked(&pseudonym) {
            return Err(ServiceError::new(
                ErrorCode::PseudonymBlocked,
                "this pseudonym is blocked",
            ));
        }

        let mut token = [0u8; 32];
        OsRng.fill_bytes(&mut token);
        let record = AuthToken {
            token: hex::encode(token),
            pseudonym,
            ring_identities: members,
            issued_at: self.clock.now(),
        };
        let _w = self.writer.lock().expect("lock");
        if let Some(path) = &self.config.token_log {
            append_line(path, &TokenLogEntry::Issue(record.clone()))?;
        }
        self.tokens
            .write()
            .expect("lock")
            .insert(record.token.clone(), record.clone());
        tracing::info!(pseudonym = %record.pseudonym, ring = record.ring_identities.len(), "login");
        Ok(record)
    }

    pub fn introspect(&self, token: &str) -> Result<Introspection, ServiceError> {
        self.tokens
            .read()
            .expect("lock")
            .get(token)
            .map(|t| Introspection {
                pseudonym: t.pseudonym.clone(),
                ring_identities: t.ring_identities.clone(),
                issued_at: t.issued_at,
            })
            .ok_or_else(|| ServiceError::new(ErrorCode::UnknownToken, "unknown token"))
    }

    pub fn is_blocked(&self, pseudonym: &str) -> bool {
        self.blocked.read().expect("lock").contains(pseudonym)
    }

    pub fn token_count(&self) -> usize {
        self.tokens.read().expect("lock").len()
    }

    /// Blocks future logins and revokes every token already issued.
    pub fn block(&self, pseudonym: &str) -> Result<Ack, ServiceError> {
        check_pseudonym(pseudonym)?;
        let _w = self.writer.lock().expect("lock");
        if let Some(path) = &self.config.block_log {
            append_line(
                path,
                &BlockLogEntry::Block {
                    pseudonym: pseudonym.to_string(),
                },
            )?;
        }
        if let Some(path) = &self.config.token_log {
            append_line(
                path,
                &TokenLogEntry::Revoke {
                    pseudonym: pseudonym.to_string(),
                },
            )?;
        }
        self.blocked
            .write()
            .expect("lock")
            .insert(pseudonym.to_string());
        self.tokens
            .write()
            .expect("lock")
            .retain(|_, t| t.pseudonym != pseudonym);
        tracing::info!(%pseudonym, "blocked");
        Ok(Ack { ok: true })
    }

    pub fn unblock(&self, pseudonym: &str) -> Result<Ack, ServiceError> {
        check_pseudonym(pseudonym)?;
        let _w = self.writer.lock().expect("lock");
        if let Some(path) = &self.config.block_log {
            append_line(
                path,
                &BlockLogEntry::Unblock {
                    pseudonym: pseudonym.to_string(),
                },
            )?;
        }
        self.blocked.write().expect("lock").remove(pseudonym);
        tracing::info!(%pseudonym, "unblocked");
        Ok(Ack { ok: true })
    }

    pub fn router(self: Arc<Self>) -> Router {
        Router::new()
            .route("/challenge", get(challenge_handler))
            .route("/login", post(login_handler))
            .route("/introspect", get(introspect_handler))
            .route("/admin/block", post(block_handler))
            .route("/admin/unblock", post(unblock_handler))
            .with_state(self)
    }
}

fn check_pseudonym(p: &str) -> Result<(), ServiceError> {
    if is_pseudonym(p) {
        Ok(())
    } else {
        Err(ServiceError::new(
            ErrorCode::BadRequest,
            "pseudonym must be 64 lowercase hex characters",
        ))
    }
}

async fn challenge_handler(State(ap): State<Arc<AuthProvider>>) -> Json<ChallengeResponse> {
    Json(ap.create_challenge())
}

async fn login_handler(
    State(ap): State<Arc<AuthProvider>>,
    Json(req): Json<LoginRequest>,
) -> Result<Json<AuthToken>, ServiceError> {
    ap.verify_login(&req).await.map(Json)
}

async fn introspect_handler(
    State(ap): State<Arc<AuthProvider>>,
    Query(q): Query<IntrospectQuery>,
) -> Result<Json<Introspection>, ServiceError> {
    ap.introspect(&q.token).map(Json)
}

async fn block_handler(
    State(ap): State<Arc<AuthProvider>>,
    ConnectInfo(addr): ConnectInfo<SocketAddr>,
    Json(req): Json<PseudonymRequest>,
) -> Result<Json<Ack>, ServiceError> {
    ensure_local(&addr)?;
    ap.block(&req.pseudonym).map(Json)
}

async fn unblock_handler(
    State(ap): State<Arc<AuthProvider>>,
    ConnectInfo(addr): ConnectInfo<SocketAddr>,
    Json(req): Json<PseudonymRequest>,
) -> Result<Json<Ack>, ServiceError> {
    ensure_local(&addr)?;
    ap.unblock(&req.pseudonym).map(Json)
}
