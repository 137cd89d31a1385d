//! Client operations: key collection, ring building, document signing and login.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use futures::future::try_join_all;
use rand::rngs::OsRng;
use ringauth_core::{keyshare, lrs, CompositeKey, GroupElement, GroupParams, IdentityRef};
use ringauth_service::authprovider::pseudonym;
use ringauth_service::keyserver::server_set_fingerprint;
use ringauth_service::wire::{AuthToken, LoginRequest, RingMember, TokenRequest};
use ringauth_service::{ClientError, HttpAuth, HttpIdp, IdpToken, KeyServerApi};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::files::{KeyringFile, RingEntry, RingFile};

/// Mints provider tokens for a given audience.
#[async_trait]
pub trait TokenSource: Send + Sync {
    async fn token(&self, account: &IdentityRef, audience: &str) -> Result<IdpToken, CliError>;
}

/// Mock providers reached over HTTP, by provider name.
#[derive(Debug, Clone)]
pub struct IdpDirectory {
    idps: BTreeMap<String, HttpIdp>,
    ttl: u64,
}

impl IdpDirectory {
    pub fn new(urls: &BTreeMap<String, String>, ttl: u64) -> Self {
        IdpDirectory {
            idps: urls
                .iter()
                .map(|(name, url)| (name.clone(), HttpIdp::new(url)))
                .collect(),
            ttl,
        }
    }
}

#[async_trait]
impl TokenSource for IdpDirectory {
    async fn token(&self, account: &IdentityRef, audience: &str) -> Result<IdpToken, CliError> {
        let idp = self.idps.get(&account.provider).ok_or_else(|| {
            CliError::Config(format!("no identity provider configured for {}", account.provider))
        })?;
        Ok(idp
            .token(&TokenRequest {
                provider: account.provider.clone(),
                user_id: account.user_id.clone(),
                audience: audience.to_string(),
                ttl: self.ttl,
                display_name: None,
            })
            .await?)
    }
}

#[derive(Debug, Clone)]
pub struct CollectReport {
    pub keyring: KeyringFile,
    /// Seconds spent obtaining provider tokens.
    pub token_secs: f64,
    /// Seconds spent fetching and checking shares.
    pub share_secs: f64,
}

fn same_epoch(epochs: impl IntoIterator<Item = (String, u64)>) -> Result<u64, CliError> {
    let epochs: Vec<(String, u64)> = epochs.into_iter().collect();
    let first = epochs
        .first()
        .map(|(_, e)| *e)
        .ok_or_else(|| CliError::Usage("no key servers configured".into()))?;
    if epochs.iter().any(|(_, e)| *e != first) {
        let listing: Vec<String> = epochs.iter().map(|(s, e)| format!("{s}={e}")).collect();
        return Err(CliError::EpochSkew(listing.join(", ")));
    }
    Ok(first)
}

/// Gathers one share per account from every server and combines them.
/// Every server must answer; nothing partial is returned.
pub async fn collect_key(
    accounts: &[IdentityRef],
    servers: &[Arc<dyn KeyServerApi>],
    tokens: &dyn TokenSource,
    params: &GroupParams,
) -> Result<CollectReport, CliError> {
    let mut accounts = accounts.to_vec();
    accounts.sort();
    accounts.dedup();
    if accounts.is_empty() {
        return Err(CliError::Usage("at least one account is required".into()));
    }

    let infos = try_join_all(servers.iter().map(|s| s.epoch_info())).await?;
    for (server, info) in servers.iter().zip(&infos) {
        if info.params_fingerprint != params.fingerprint() {
            return Err(CliError::ServerInconsistency {
                server: server.label(),
                detail: "uses different group parameters".into(),
            });
        }
    }
    let epoch = same_epoch(infos.iter().map(|i| (i.server_id.clone(), i.epoch)))?;

    let started = Instant::now();
    let token_sets = try_join_all(infos.iter().map(|info| {
        try_join_all(accounts.iter().map(|a| tokens.token(a, &info.server_id)))
    }))
    .await?;
    let token_secs = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let responses = try_join_all(
        servers
            .iter()
            .zip(token_sets)
            .map(|(server, toks)| server.private_shares(toks)),
    )
    .await?;

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (server, resp) in servers.iter().zip(&responses) {
        let inconsistent = |detail: String| CliError::ServerInconsistency {
            server: server.label(),
            detail,
        };
        if resp.epoch != epoch {
            return Err(CliError::EpochSkew(format!(
                "{} moved to epoch {} during collection",
                server.label(),
                resp.epoch
            )));
        }
        let mut got: Vec<IdentityRef> = resp
            .shares
            .iter()
            .map(|s| IdentityRef::new(&s.provider, &s.user_id))
            .collect::<Result<_, _>>()?;
        got.sort();
        if got != accounts {
            return Err(inconsistent("returned shares for other accounts".into()));
        }
        let directory = try_join_all(got.iter().map(|a| server.public_share(a, Some(epoch)))).await?;
        for share in &resp.shares {
            let x = params.scalar_from_hex(&share.x_hex)?;
            let y = params.element_from_hex(&share.y_hex)?;
            if params.exp_secret(&params.generator(), &x) != y {
                return Err(inconsistent(format!(
                    "share for {}:{} does not match its public part",
                    share.provider, share.user_id
                )));
            }
            let listed = directory
                .iter()
                .find(|d| d.provider == share.provider && d.user_id == share.user_id)
                .map(|d| d.y_hex.as_str());
            if listed != Some(share.y_hex.as_str()) {
                return Err(inconsistent(format!(
                    "directory key for {}:{} differs from the issued share",
                    share.provider, share.user_id
                )));
            }
            xs.push(x);
            ys.push(y);
        }
    }
    let share_secs = started.elapsed().as_secs_f64();

    let x_c = keyshare::combine_private(&xs, params)?;
    let y_c = keyshare::combine_public(&ys, params)?;
    let key = CompositeKey::new(x_c, accounts.clone(), epoch, params)?;
    if key.public() != &y_c {
        return Err(CliError::Crypto(
            "combined private key does not match combined public shares".into(),
        ));
    }
    let fingerprint = server_set_fingerprint(infos.iter().map(|i| i.server_id.as_str()));
    Ok(CollectReport {
        keyring: KeyringFile::new(accounts, epoch, key.private(), &y_c, fingerprint, params),
        token_secs,
        share_secs,
    })
}

/// Combined directory key of one member: the product of every account's
/// public share from every server.
pub async fn member_key(
    member: &RingMember,
    servers: &[Arc<dyn KeyServerApi>],
    epoch: Option<u64>,
    params: &GroupParams,
) -> Result<(u64, GroupElement), CliError> {
    let fetches = member
        .accounts()
        .iter()
        .flat_map(|a| servers.iter().map(move |s| s.public_share(a, epoch)));
    let responses = try_join_all(fetches).await?;
    let served = same_epoch(responses.iter().map(|r| (r.server_id.clone(), r.epoch)))?;
    let shares = responses
        .iter()
        .map(|r| params.element_from_hex(&r.y_hex))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((served, keyshare::combine_public(&shares, params)?))
}

/// Looks up every member in the directory and returns the canonical ring.
pub async fn build_ring(
    members: &[RingMember],
    servers: &[Arc<dyn KeyServerApi>],
    epoch: Option<u64>,
    params: &GroupParams,
) -> Result<RingFile, CliError> {
    let mut members: Vec<RingMember> = members
        .iter()
        .map(|m| m.normalized().ok_or_else(|| CliError::Usage("empty ring member".into())))
        .collect::<Result<_, _>>()?;
    members.sort();
    members.dedup();
    if members.is_empty() {
        return Err(CliError::Usage("a ring needs at least one member".into()));
    }
    let keys = try_join_all(members.iter().map(|m| member_key(m, servers, epoch, params))).await?;
    let ring_epoch = same_epoch(
        members
            .iter()
            .zip(&keys)
            .map(|(m, (e, _))| (m.to_string(), *e)),
    )?;
    let entries = members
        .into_iter()
        .zip(keys)
        .map(|(member, (_, y))| RingEntry {
            member,
            y_hex: params.element_to_hex(&y),
        })
        .collect();
    let ring = RingFile::new(ring_epoch, entries);
    ring.ring(params)?;
    Ok(ring)
}

/// SHA-256 of the file contents, the message documents are signed over.
pub fn document_digest(path: &Path) -> Result<[u8; 32], CliError> {
    let body = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&body).into())
}

#[derive(Debug, Clone)]
pub struct SignedDocument {
    pub detached: Vec<u8>,
    pub anonymity_set: Vec<RingMember>,
    /// True when the ring has one member and so offers no anonymity.
    pub lone_signer: bool,
}

pub fn sign_document(
    file: &Path,
    ring: &RingFile,
    keyring: &KeyringFile,
    scope: &[u8],
    params: &GroupParams,
) -> Result<SignedDocument, CliError> {
    let (x, y) = keyring.keys(params)?;
    let lrs_ring = ring.ring(params)?;
    let index = lrs_ring.position(&y).ok_or(CliError::NotInRing)?;
    let digest = document_digest(file)?;
    let sig = lrs::sign(&digest, &lrs_ring, index, &x, scope, params, &mut OsRng)?;
    Ok(SignedDocument {
        detached: lrs::encode_detached(&sig, params),
        anonymity_set: ring.member_list(),
        lone_signer: lrs_ring.len() == 1,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub accepted: bool,
    pub tag: Option<String>,
    pub pseudonym: Option<String>,
    pub scope: String,
    pub anonymity_set: Vec<RingMember>,
}

pub fn verify_document(
    file: &Path,
    detached: &[u8],
    ring: &RingFile,
    params: &GroupParams,
) -> Result<VerifyReport, CliError> {
    let sig = lrs::decode_detached(detached, params)
        .map_err(|e| CliError::Malformed(format!("signature file: {e}")))?;
    let lrs_ring = ring.ring(params)?;
    let digest = document_digest(file)?;
    let outcome = match lrs::verify(&digest, &lrs_ring, &sig, params) {
        Ok(o) => o,
        Err(ringauth_core::LrsError::LengthMismatch { sig, ring }) => {
            return Err(CliError::Rejected(format!(
                "signature covers {sig} members, ring has {ring}"
            )))
        }
        Err(e) => return Err(CliError::Malformed(e.to_string())),
    };
    Ok(VerifyReport {
        accepted: outcome.accepted,
        tag: outcome.tag.as_ref().map(|t| params.element_to_hex(t)),
        pseudonym: outcome.tag.as_ref().map(|t| pseudonym(t, params)),
        scope: String::from_utf8_lossy(&sig.scope).into_owned(),
        anonymity_set: ring.member_list(),
    })
}

/// Challenge, sign the nonce over the directory's current ring, submit.
pub async fn login(
    auth: &HttpAuth,
    members: &[RingMember],
    servers: &[Arc<dyn KeyServerApi>],
    keyring: &KeyringFile,
    scope_override: Option<&str>,
    params: &GroupParams,
) -> Result<AuthToken, CliError> {
    let (x, y) = keyring.keys(params)?;
    let challenge = auth.challenge().await?;
    let scope = scope_override.unwrap_or(&challenge.scope).as_bytes().to_vec();
    let ring_file = build_ring(members, servers, None, params).await?;
    let ring = ring_file.ring(params)?;
    let index = ring.position(&y).ok_or(CliError::NotInRing)?;
    let nonce = hex::decode(&challenge.nonce)
        .map_err(|e| CliError::Client(ClientError::Protocol {
            target: auth.base().to_string(),
            detail: format!("nonce: {e}"),
        }))?;
    let sig = lrs::sign(&nonce, &ring, index, &x, &scope, params, &mut OsRng)?;
    let req = LoginRequest {
        challenge_id: challenge.challenge_id,
        identities: ring_file.member_list(),
        sig_hex: hex::encode(lrs::encode(&sig, params)),
        ring: Some(ring_file.members.iter().map(|m| m.y_hex.clone()).collect()),
    };
    Ok(auth.login(&req).await?)
}
