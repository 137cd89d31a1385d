//! The key server: verifies provider tokens, issues private key shares for
//! the current epoch, serves public shares (current and archived), sends
//! invitations, and rotates epochs.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{ConnectInfo, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::rngs::OsRng;
use rand::RngCore;
use ringauth_core::keyshare::{self, ArchiveRecord};
use ringauth_core::{EpochState, GroupElement, GroupParams, IdentityRef, MasterSecret};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::Clock;
use crate::error::{ErrorCode, ServiceError};
use crate::idp::{verify_token, IdpToken, ProviderSecrets};
use crate::wire::{
    EpochInfo, InvitationsRequest, InvitationsResponse, PubkeyQuery, PubkeyResponse, ShareEntry,
    ShareRequest, ShareResponse,
};

fn default_listen() -> String {
    "127.0.0.1:0".into()
}
fn default_invite_cap() -> usize {
    100
}
fn default_window_limit() -> usize {
    10_000
}
fn default_window_secs() -> u64 {
    3600
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyServerConfig {
    pub server_id: String,
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Parameter file; the pinned production group when absent.
    #[serde(default)]
    pub params_path: Option<PathBuf>,
    /// Provider name to hex HMAC secret.
    pub provider_secrets: BTreeMap<String, String>,
    #[serde(default)]
    pub state_path: Option<PathBuf>,
    #[serde(default)]
    pub archive_path: Option<PathBuf>,
    #[serde(default)]
    pub outbox_path: Option<PathBuf>,
    /// Most identities accepted in one invitation request.
    #[serde(default = "default_invite_cap")]
    pub invite_cap: usize,
    /// Most invitations sent per window across all requesters.
    #[serde(default = "default_window_limit")]
    pub invite_window_limit: usize,
    #[serde(default = "default_window_secs")]
    pub invite_window_secs: u64,
    /// Require every token in a multi-provider request to carry the same display name.
    #[serde(default)]
    pub require_same_display_name: bool,
    /// Fixed first-epoch secret for reproducible fixtures. Later epochs are always random.
    #[serde(default)]
    pub initial_secret_hex: Option<String>,
}

impl KeyServerConfig {
    pub fn new(server_id: impl Into<String>, provider_secrets: BTreeMap<String, String>) -> Self {
        KeyServerConfig {
            server_id: server_id.into(),
            listen: default_listen(),
            params_path: None,
            provider_secrets,
            state_path: None,
            archive_path: None,
            outbox_path: None,
            invite_cap: default_invite_cap(),
            invite_window_limit: default_window_limit(),
            invite_window_secs: default_window_secs(),
            require_same_display_name: false,
            initial_secret_hex: None,
        }
    }
}

/// One line of the outbox file. Carries nothing about who asked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Invitation {
    pub batch_id: String,
    pub provider: String,
    pub user_id: String,
    pub url_token: String,
    pub created_at: u64,
}

struct Inner {
    state: Option<EpochState>,
    outbox: Vec<Invitation>,
    window_start: u64,
    window_count: usize,
}

impl Inner {
    fn state(&self) -> &EpochState {
        self.state.as_ref().expect("epoch state present outside rotation")
    }

    fn state_mut(&mut self) -> &mut EpochState {
        self.state.as_mut().expect("epoch state present outside rotation")
    }
}

pub struct KeyServer {
    config: KeyServerConfig,
    params: GroupParams,
    secrets: ProviderSecrets,
    clock: Arc<dyn Clock>,
    inner: RwLock<Inner>,
}

fn io_error(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::internal(format!("{}: {e}", path.display()))
}

impl KeyServer {
    /// Loads persisted state if present, otherwise starts epoch 0.
    pub fn open(
        config: KeyServerConfig,
        params: GroupParams,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        let secrets = ProviderSecrets::from_hex_map(&config.provider_secrets)?;
        let archive = match &config.archive_path {
            Some(path) => keyshare::load_archive(path, &params)?,
            None => BTreeMap::new(),
        };
        let state = match &config.state_path {
            Some(path) if path.exists() => {
                let (epoch, master) = keyshare::read_secret_file(path)?;
                EpochState::restore(epoch, master, archive)
            }
            _ => {
                let master = match &config.initial_secret_hex {
                    Some(hex) => MasterSecret::from_hex(hex)?,
                    None => MasterSecret::random(&mut OsRng),
                };
                if let Some(path) = &config.state_path {
                    keyshare::write_secret_file(path, 0, &master)?;
                }
                EpochState::restore(0, master, archive)
            }
        };
        let outbox = match &config.outbox_path {
            Some(path) if path.exists() => read_outbox(path)?,
            _ => Vec::new(),
        };
        let now = clock.now();
        Ok(KeyServer {
            config,
            params,
            secrets,
            clock,
            inner: RwLock::new(Inner {
                state: Some(state),
                outbox,
                window_start: now,
                window_count: 0,
            }),
        })
    }

    pub fn server_id(&self) -> &str {
        &self.config.server_id
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn config(&self) -> &KeyServerConfig {
        &self.config
    }

    pub fn epoch_info(&self) -> EpochInfo {
        let inner = self.inner.read().expect("lock");
        EpochInfo {
            server_id: self.config.server_id.clone(),
            epoch: inner.state().epoch(),
            params_fingerprint: self.params.fingerprint(),
        }
    }

    /// Queues one invitation per identity and returns only a batch id.
    pub fn request_invitations(
        &self,
        identities: &[IdentityRef],
    ) -> Result<InvitationsResponse, ServiceError> {
        if identities.is_empty() {
            return Err(ServiceError::new(ErrorCode::EmptyRequest, "no identities"));
        }
        if identities.len() > self.config.invite_cap {
            return Err(ServiceError::new(
                ErrorCode::RateLimited,
                format!(
                    "{} identities exceeds the cap of {}",
                    identities.len(),
                    self.config.invite_cap
                ),
            ));
        }
        let now = self.clock.now();
        let mut inner = self.inner.write().expect("lock");
        if now.saturating_sub(inner.window_start) >= self.config.invite_window_secs {
            inner.window_start = now;
            inner.window_count = 0;
        }
        if inner.window_count + identities.len() > self.config.invite_window_limit {
            return Err(ServiceError::new(
                ErrorCode::RateLimited,
                "invitation budget for this window is spent",
            ));
        }
        inner.window_count += identities.len();

        let batch_id = random_hex(16);
        let batch: Vec<Invitation> = identities
            .iter()
            .map(|id| Invitation {
                batch_id: batch_id.clone(),
                provider: id.provider.clone(),
                user_id: id.user_id.clone(),
                url_token: random_hex(16),
                created_at: now,
            })
            .collect();
        if let Some(path) = &self.config.outbox_path {
            append_outbox(path, &batch)?;
        }
        inner.outbox.extend(batch);
        Ok(InvitationsResponse { batch_id })
    }

    pub fn outbox(&self) -> Vec<Invitation> {
        self.inner.read().expect("lock").outbox.clone()
    }

    /// Verifies every token, then returns one share per verified account.
    /// Any bad token fails the whole request.
    pub fn get_private_share(&self, tokens: &[IdpToken]) -> Result<ShareResponse, ServiceError> {
        self.get_private_share_at(tokens, None)
    }

    /// As `get_private_share`, naming the epoch. Only the current one is served.
    pub fn get_private_share_at(
        &self,
        tokens: &[IdpToken],
        epoch: Option<u64>,
    ) -> Result<ShareResponse, ServiceError> {
        if tokens.is_empty() {
            return Err(ServiceError::new(ErrorCode::EmptyRequest, "no tokens"));
        }
        let now = self.clock.now();
        let mut identities = Vec::with_capacity(tokens.len());
        for token in tokens {
            let id = verify_token(&self.secrets, token, &self.config.server_id, now)?;
            if identities.contains(&id) {
                return Err(ServiceError::new(
                    ErrorCode::DuplicateIdentity,
                    format!("{id} presented twice"),
                ));
            }
            identities.push(id);
        }
        if self.config.require_same_display_name
            && tokens.windows(2).any(|w| w[0].display_name != w[1].display_name)
        {
            return Err(ServiceError::new(
                ErrorCode::NameMismatch,
                "accounts carry different display names",
            ));
        }

        let mut inner = self.inner.write().expect("lock");
        let state = inner.state();
        let epoch = epoch.unwrap_or(state.epoch());
        let mut shares = Vec::with_capacity(identities.len());
        let mut fresh = Vec::new();
        for id in &identities {
            let share = state.private_share(&self.config.server_id, epoch, id, &self.params)?;
            let y = keyshare::public_share(&share, &self.params);
            if state.archived(epoch, id).is_none() {
                fresh.push((id.clone(), y.clone()));
            }
            shares.push(ShareEntry {
                provider: id.provider.clone(),
                user_id: id.user_id.clone(),
                x_hex: self.params.scalar_to_hex(&share.x),
                y_hex: self.params.element_to_hex(&y),
            });
        }
        self.archive_locked(&mut inner, epoch, fresh)?;
        Ok(ShareResponse {
            server_id: self.config.server_id.clone(),
            epoch,
            shares,
        })
    }

    // Persists first so a failed write leaves memory untouched.
    fn archive_locked(
        &self,
        inner: &mut Inner,
        epoch: u64,
        fresh: Vec<(IdentityRef, GroupElement)>,
    ) -> Result<(), ServiceError> {
        if fresh.is_empty() {
            return Ok(());
        }
        if let Some(path) = &self.config.archive_path {
            let records: Vec<ArchiveRecord> = fresh
                .iter()
                .map(|(id, y)| ArchiveRecord::new(epoch, id, y, &self.params))
                .collect();
            keyshare::append_archive(path, &records)?;
        }
        let state = inner.state_mut();
        for (id, y) in fresh {
            state.record(epoch, &id, y)?;
        }
        Ok(())
    }

    /// Current epoch: derived on demand and archived. Past epochs: archive only.
    pub fn get_public_share(
        &self,
        identity: &IdentityRef,
        epoch: Option<u64>,
    ) -> Result<PubkeyResponse, ServiceError> {
        let respond = |epoch: u64, y: &GroupElement| PubkeyResponse {
            server_id: self.config.server_id.clone(),
            epoch,
            provider: identity.provider.clone(),
            user_id: identity.user_id.clone(),
            y_hex: self.params.element_to_hex(y),
        };
        let (current, y, archived) = {
            let inner = self.inner.read().expect("lock");
            let state = inner.state();
            let current = state.epoch();
            let wanted = epoch.unwrap_or(current);
            if wanted != current {
                let y = state.public_share_at(wanted, identity, &self.params)?;
                return Ok(respond(wanted, &y));
            }
            let y = state.current_public(identity, &self.params)?;
            (current, y, state.archived(current, identity).is_some())
        };
        if !archived {
            let mut inner = self.inner.write().expect("lock");
            // A rotation may have slipped in between the locks.
            if inner.state().epoch() != current {
                return Err(ServiceError::new(
                    ErrorCode::EpochExpired,
                    "epoch rotated during request",
                ));
            }
            if inner.state().archived(current, identity).is_none() {
                self.archive_locked(&mut inner, current, vec![(identity.clone(), y.clone())])?;
            }
        }
        Ok(respond(current, &y))
    }

    /// Starts a new epoch under `fresh`, blocking share issuance meanwhile.
    pub fn rotate(&self, fresh: MasterSecret) -> Result<EpochInfo, ServiceError> {
        let mut inner = self.inner.write().expect("lock");
        let next = inner.state().epoch() + 1;
        if let Some(path) = &self.config.state_path {
            keyshare::write_secret_file(path, next, &fresh)?;
        }
        let old = inner.state.take().expect("epoch state present");
        inner.state = Some(old.rotate(fresh));
        drop(inner);
        tracing::info!(server = %self.config.server_id, epoch = next, "rotated epoch");
        Ok(self.epoch_info())
    }

    pub fn archive_len(&self) -> usize {
        self.inner.read().expect("lock").state().archive().len()
    }

    pub fn router(self: Arc<Self>) -> Router {
        Router::new()
            .route("/invitations", post(invitations_handler))
            .route("/share", post(share_handler))
            .route("/pubkey", get(pubkey_handler))
            .route("/epoch", get(epoch_handler))
            .route("/rotate", post(rotate_handler))
            .with_state(self)
    }
}

pub(crate) fn random_hex(len: usize) -> String {
    let mut buf = vec![0u8; len];
    OsRng.fill_bytes(&mut buf);
    hex::encode(buf)
}

/// Fingerprint of a set of key servers: SHA-256 over the sorted ids, newline-joined.
pub fn server_set_fingerprint<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.sort_unstable();
    hex::encode(Sha256::digest(ids.join("\n").as_bytes()))
}

fn append_outbox(path: &Path, batch: &[Invitation]) -> Result<(), ServiceError> {
    let mut buf = String::new();
    for inv in batch {
        buf.push_str(&serde_json::to_string(inv).map_err(ServiceError::internal)?);
        buf.push('\n');
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_error(path, e))?;
    file.write_all(buf.as_bytes()).map_err(|e| io_error(path, e))
}

pub fn read_outbox(path: &Path) -> Result<Vec<Invitation>, ServiceError> {
    let body = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(ServiceError::internal))
        .collect()
}

pub(crate) fn ensure_local(addr: &SocketAddr) -> Result<(), ServiceError> {
    if addr.ip().is_loopback() {
        Ok(())
    } else {
        Err(ServiceError::new(
            ErrorCode::Forbidden,
            "admin endpoints are local-only",
        ))
    }
}

async fn invitations_handler(
    State(ks): State<Arc<KeyServer>>,
    Json(req): Json<InvitationsRequest>,
) -> Result<Json<InvitationsResponse>, ServiceError> {
    ks.request_invitations(&req.identities).map(Json)
}

async fn share_handler(
    State(ks): State<Arc<KeyServer>>,
    Json(req): Json<ShareRequest>,
) -> Result<Json<ShareResponse>, ServiceError> {
    tokio::task::spawn_blocking(move || ks.get_private_share_at(&req.tokens, req.epoch))
        .await
        .map_err(ServiceError::internal)?
        .map(Json)
}

async fn pubkey_handler(
    State(ks): State<Arc<KeyServer>>,
    Query(q): Query<PubkeyQuery>,
) -> Result<Json<PubkeyResponse>, ServiceError> {
    let identity = IdentityRef::new(q.provider, q.user_id)?;
    tokio::task::spawn_blocking(move || ks.get_public_share(&identity, q.epoch))
        .await
        .map_err(ServiceError::internal)?
        .map(Json)
}

async fn epoch_handler(State(ks): State<Arc<KeyServer>>) -> Json<EpochInfo> {
    Json(ks.epoch_info())
}

async fn rotate_handler(
    State(ks): State<Arc<KeyServer>>,
    ConnectInfo(addr): ConnectInfo<SocketAddr>,
) -> Result<Json<EpochInfo>, ServiceError> {
    ensure_local(&addr)?;
    ks.rotate(MasterSecret::random(&mut OsRng)).map(Json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::idp::issue_token;

    const NOW: u64 = 1_700_000_000;

    fn provider_map() -> BTreeMap<String, String> {
        BTreeMap::from([
            ("mockbook".to_string(), hex::encode([1u8; 32])),
            ("mockpal".to_string(), hex::encode([2u8; 32])),
        ])
    }

    fn secrets() -> ProviderSecrets {
        ProviderSecrets::from_hex_map(&provider_map()).unwrap()
    }

    fn server(id: &str) -> KeyServer {
        let mut cfg = KeyServerConfig::new(id, provider_map());
        cfg.invite_cap = 100;
        KeyServer::open(cfg, GroupParams::production().clone(), Arc::new(ManualClock::new(NOW)))
            .unwrap()
    }

    fn token(provider: &str, user: &str, aud: &str, ttl: u64) -> IdpToken {
        issue_token(&secrets(), provider, user, user, aud, ttl, NOW).unwrap()
    }

    fn id(p: &str, u: &str) -> IdentityRef {
        IdentityRef::new(p, u).unwrap()
    }

    #[test]
    fn single_token_share() {
        let ks = server("ks1");
        let resp = ks.get_private_share(&[token("mockbook", "alice", "ks1", 60)]).unwrap();
        assert_eq!(resp.epoch, 0);
        assert_eq!(resp.shares.len(), 1);
        let again = ks.get_private_share(&[token("mockbook", "alice", "ks1", 120)]).unwrap();
        assert_eq!(resp.shares, again.shares);
        let pubkey = ks.get_public_share(&id("mockbook", "alice"), None).unwrap();
        assert_eq!(pubkey.y_hex, resp.shares[0].y_hex);
    }

    #[test]
    fn multi_provider_and_atomic_rejection() {
        let ks = server("ks1");
        let both = ks
            .get_private_share(&[
                token("mockbook", "alice", "ks1", 60),
                token("mockpal", "alice", "ks1", 60),
            ])
            .unwrap();
        assert_eq!(both.shares.len(), 2);
        assert_ne!(both.shares[0].x_hex, both.shares[1].x_hex);

        let before = ks.archive_len();
        let err = ks
            .get_private_share(&[
                token("mockbook", "bob", "ks1", 60),
                token("mockpal", "bob", "ks1", 0),
            ])
            .unwrap_err();
        assert_eq!(err.code, ErrorCode::TokenExpired);
        assert_eq!(ks.archive_len(), before);

        let err = ks
            .get_private_share(&[
                token("mockbook", "bob", "ks1", 60),
                token("mockbook", "bob", "ks1", 90),
            ])
            .unwrap_err();
        assert_eq!(err.code, ErrorCode::DuplicateIdentity);
        assert_eq!(ks.get_private_share(&[]).unwrap_err().code, ErrorCode::EmptyRequest);
    }

    #[test]
    fn forwarded_token_rejected_by_other_server() {
        let a = server("ks1");
        let b = server("ks2");
        let t = token("mockbook", "alice", "ks1", 60);
        assert!(a.get_private_share(std::slice::from_ref(&t)).is_ok());
        assert_eq!(b.get_private_share(&[t]).unwrap_err().code, ErrorCode::AudienceMismatch);
    }

    #[test]
    fn display_name_predicate() {
        let mut cfg = KeyServerConfig::new("ks1", provider_map());
        cfg.require_same_display_name = true;
        let ks = KeyServer::open(
            cfg,
            GroupParams::production().clone(),
            Arc::new(ManualClock::new(NOW)),
        )
        .unwrap();
        let a = issue_token(&secrets(), "mockbook", "alice", "Alice A", "ks1", 60, NOW).unwrap();
        let b = issue_token(&secrets(), "mockpal", "alice", "Alice B", "ks1", 60, NOW).unwrap();
        assert_eq!(ks.get_private_share(&[a.clone(), b]).unwrap_err().code, ErrorCode::NameMismatch);
        let c = issue_token(&secrets(), "mockpal", "alice", "Alice A", "ks1", 60, NOW).unwrap();
        assert!(ks.get_private_share(&[a, c]).is_ok());
    }

    #[test]
    fn invitations_and_caps() {
        let ks = server("ks1");
        let ids = vec![id("mockbook", "alice"), id("mockbook", "bob"), id("mockbook", "charles")];
        let resp = ks.request_invitations(&ids).unwrap();
        let outbox = ks.outbox();
        assert_eq!(outbox.len(), 3);
        assert!(outbox.iter().all(|i| i.batch_id == resp.batch_id));
        let tokens: std::collections::HashSet<_> = outbox.iter().map(|i| &i.url_token).collect();
        assert_eq!(tokens.len(), 3);

        assert_eq!(ks.request_invitations(&[]).unwrap_err().code, ErrorCode::EmptyRequest);
        let many: Vec<_> = (0..101).map(|i| id("mockbook", &format!("u{i}"))).collect();
        assert_eq!(ks.request_invitations(&many).unwrap_err().code, ErrorCode::RateLimited);
        assert_eq!(ks.outbox().len(), 3);
    }

    #[test]
    fn window_budget() {
        let mut cfg = KeyServerConfig::new("ks1", provider_map());
        cfg.invite_window_limit = 4;
        let clock = Arc::new(ManualClock::new(NOW));
        let ks = KeyServer::open(cfg, GroupParams::production().clone(), clock.clone()).unwrap();
        let ids = vec![id("mockbook", "a"), id("mockbook", "b"), id("mockbook", "c")];
        ks.request_invitations(&ids).unwrap();
        assert_eq!(ks.request_invitations(&ids).unwrap_err().code, ErrorCode::RateLimited);
        clock.advance(3600);
        assert!(ks.request_invitations(&ids).is_ok());
    }

    #[test]
    fn rotation_and_archive() {
        let ks = server("ks1");
        let alice = id("mockbook", "alice");
        let y0 = ks.get_public_share(&alice, None).unwrap();
        ks.rotate(MasterSecret::random(&mut OsRng)).unwrap();
        assert_eq!(ks.epoch_info().epoch, 1);
        assert_eq!(ks.get_public_share(&alice, Some(0)).unwrap(), y0);
        let y1 = ks.get_public_share(&alice, None).unwrap();
        assert_ne!(y1.y_hex, y0.y_hex);
        let bob = id("mockbook", "bob");
        assert_eq!(
            ks.get_public_share(&bob, Some(0)).unwrap_err().code,
            ErrorCode::UnknownArchivedKey
        );
        assert_eq!(ks.get_public_share(&bob, Some(5)).unwrap_err().code, ErrorCode::FutureEpoch);

        let before = ks.archive_len();
        let t = token("mockbook", "alice", "ks1", 60);
        let err = ks.get_private_share_at(std::slice::from_ref(&t), Some(0)).unwrap_err();
        assert_eq!(err.code, ErrorCode::EpochExpired);
        assert_eq!(ks.archive_len(), before);
        assert_eq!(ks.get_private_share_at(&[t], Some(1)).unwrap().epoch, 1);
    }

    #[test]
    fn fingerprint_of_params() {
        let ks = server("ks1");
        let info = ks.epoch_info();
        let expected =
            hex::encode(Sha256::digest(GroupParams::production().to_json().as_bytes()));
        assert_eq!(info.params_fingerprint, expected);
        assert_eq!(info.epoch, 0);
        assert_eq!(info.server_id, "ks1");
    }

    #[test]
    fn persistence_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = KeyServerConfig::new("ks1", provider_map());
        cfg.state_path = Some(dir.path().join("state.json"));
        cfg.archive_path = Some(dir.path().join("archive.jsonl"));
        cfg.outbox_path = Some(dir.path().join("outbox.jsonl"));
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(NOW));
        let params = GroupParams::production().clone();
        let alice = id("mockbook", "alice");

        let ks = KeyServer::open(cfg.clone(), params.clone(), clock.clone()).unwrap();
        let y0 = ks.get_public_share(&alice, None).unwrap();
        ks.request_invitations(std::slice::from_ref(&alice)).unwrap();
        ks.rotate(MasterSecret::random(&mut OsRng)).unwrap();
        let y1 = ks.get_public_share(&alice, None).unwrap();
        drop(ks);

        let ks = KeyServer::open(cfg, params, clock).unwrap();
        assert_eq!(ks.epoch_info().epoch, 1);
        assert_eq!(ks.get_public_share(&alice, Some(0)).unwrap(), y0);
        assert_eq!(ks.get_public_share(&alice, None).unwrap(), y1);
        assert_eq!(ks.outbox().len(), 1);
    }
}
