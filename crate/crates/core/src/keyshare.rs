//! Anytrust key material.
//!
//! Every key server holds an epoch master secret and derives a private key
//! share for any identity on demand with HMAC-SHA-256. A client adds the
//! shares from all servers (and from all identity providers it authenticated
//! with) into one composite private key; anyone can multiply the matching
//! public shares into the composite public key.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::group::{GroupElement, GroupError, GroupParams, Scalar};

const SHARE_TAG: &[u8] = b"share";

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("invalid identity: {0}")]
    InvalidIdentity(String),
    #[error("no shares to combine")]
    EmptyShares,
    #[error("composite private key is zero")]
    ZeroKey,
    #[error("epoch {requested} expired (current epoch is {current})")]
    EpochExpired { requested: u64, current: u64 },
    #[error("epoch {requested} has not started (current epoch is {current})")]
    FutureEpoch { requested: u64, current: u64 },
    #[error("no archived public key for {identity} at epoch {epoch}")]
    UnknownArchivedKey { epoch: u64, identity: IdentityRef },
    #[error("archive already holds a different key for {identity} at epoch {epoch}")]
    ArchiveConflict { epoch: u64, identity: IdentityRef },
    #[error("invalid master secret: {0}")]
    BadSecret(String),
    #[error("share derivation exhausted its counter")]
    DerivationExhausted,
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record in {path}: {detail}")]
    Format { path: String, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KeyError + '_ {
    move |source| KeyError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// An account at a (mock) identity provider.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawIdentity")]
pub struct IdentityRef {
    pub provider: String,
    pub user_id: String,
}

#[derive(Deserialize)]
struct RawIdentity {
    provider: String,
    user_id: String,
}

impl TryFrom<RawIdentity> for IdentityRef {
    type Error = KeyError;

    fn try_from(raw: RawIdentity) -> Result<Self, Self::Error> {
        IdentityRef::new(raw.provider, raw.user_id)
    }
}

impl IdentityRef {
    pub fn new(provider: impl Into<String>, user_id: impl Into<String>) -> Result<Self, KeyError> {
        let provider = provider.into();
        let user_id = user_id.into();
        if provider.is_empty() || user_id.is_empty() {
            return Err(KeyError::InvalidIdentity(
                "provider and user_id must be non-empty".into(),
            ));
        }
        if provider.contains(':') {
            return Err(KeyError::InvalidIdentity(format!(
                "provider {provider:?} contains ':'"
            )));
        }
        Ok(IdentityRef { provider, user_id })
    }

    /// `provider:user_id`, the byte string identities are hashed under.
    pub fn canonical(&self) -> String {
        format!("{}:{}", self.provider, self.user_id)
    }
}

impl fmt::Display for IdentityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.provider, self.user_id)
    }
}

impl FromStr for IdentityRef {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some((provider, user_id)) => IdentityRef::new(provider, user_id),
            None => Err(KeyError::InvalidIdentity(format!(
                "{s:?} is not of the form provider:user_id"
            ))),
        }
    }
}

/// 32-byte epoch master secret. Wiped on drop.
#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct MasterSecret([u8; 32]);

impl fmt::Debug for MasterSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MasterSecret(..)")
    }
}

impl MasterSecret {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        MasterSecret(bytes)
    }

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        MasterSecret(bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self, KeyError> {
        let bytes = hex::decode(s.trim()).map_err(|e| KeyError::BadSecret(e.to_string()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| KeyError::BadSecret("expected 32 bytes".into()))?;
        Ok(MasterSecret(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

/// One server's private key share for one identity in one epoch.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyShare {
    pub server_id: String,
    pub epoch: u64,
    pub identity: IdentityRef,
    pub x: Scalar,
}

impl fmt::Debug for KeyShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyShare")
            .field("server_id", &self.server_id)
            .field("epoch", &self.epoch)
            .field("identity", &self.identity)
            .finish_non_exhaustive()
    }
}

/// `hash_to_scalar(HMAC(master, epoch_be64 || provider || ":" || user_id || ctr), "share")`,
/// bumping the one-byte counter until the result is non-zero.
pub fn derive_scalar(
    master: &MasterSecret,
    epoch: u64,
    identity: &IdentityRef,
    params: &GroupParams,
) -> Result<Scalar, KeyError> {
    for ctr in 0..=u8::MAX {
        let mut mac = Hmac::<Sha256>::new_from_slice(master.as_bytes())
            .expect("HMAC accepts any key length");
        mac.update(&epoch.to_be_bytes());
        mac.update(identity.canonical().as_bytes());
        mac.update(&[ctr]);
        let tag = mac.finalize().into_bytes();
        let x = params.hash_to_scalar(&tag, SHARE_TAG);
        if !x.is_zero() {
            return Ok(x);
        }
    }
    Err(KeyError::DerivationExhausted)
}

pub fn derive_share(
    server_id: &str,
    master: &MasterSecret,
    epoch: u64,
    identity: &IdentityRef,
    params: &GroupParams,
) -> Result<KeyShare, KeyError> {
    Ok(KeyShare {
        server_id: server_id.to_string(),
        epoch,
        identity: identity.clone(),
        x: derive_scalar(master, epoch, identity, params)?,
    })
}

pub fn public_share(share: &KeyShare, params: &GroupParams) -> GroupElement {
    params.exp_secret(&params.generator(), &share.x)
}

/// Sum of private shares modulo `q`.
pub fn combine_private(shares: &[Scalar], params: &GroupParams) -> Result<Scalar, KeyError> {
    let (first, rest) = shares.split_first().ok_or(KeyError::EmptyShares)?;
    Ok(rest
        .iter()
        .fold(first.clone(), |acc, s| params.scalar_add(&acc, s)))
}

/// Product of public shares modulo `p`.
pub fn combine_public(
    shares: &[GroupElement],
    params: &GroupParams,
) -> Result<GroupElement, KeyError> {
    let (first, rest) = shares.split_first().ok_or(KeyError::EmptyShares)?;
    Ok(rest.iter().fold(first.clone(), |acc, y| params.mul(&acc, y)))
}

/// A client's combined key across all servers and providers.
#[derive(Clone, PartialEq, Eq)]
pub struct CompositeKey {
    x_c: Scalar,
    y_c: GroupElement,
    pub identities: Vec<IdentityRef>,
    pub epoch: u64,
}

impl fmt::Debug for CompositeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompositeKey")
            .field("y_c", &self.y_c)
            .field("identities", &self.identities)
            .field("epoch", &self.epoch)
            .finish_non_exhaustive()
    }
}

impl CompositeKey {
    pub fn new(
        x_c: Scalar,
        identities: Vec<IdentityRef>,
        epoch: u64,
        params: &GroupParams,
    ) -> Result<Self, KeyError> {
        if x_c.is_zero() {
            return Err(KeyError::ZeroKey);
        }
        let y_c = params.exp_secret(&params.generator(), &x_c);
        Ok(CompositeKey {
            x_c,
            y_c,
            identities,
            epoch,
        })
    }

    pub fn private(&self) -> &Scalar {
        &self.x_c
    }

    pub fn public(&self) -> &GroupElement {
        &self.y_c
    }
}

/// One key server's epoch state: the current master secret and the archive
/// of public shares served so far.
#[derive(Debug)]
pub struct EpochState {
    epoch: u64,
    master: MasterSecret,
    archive: BTreeMap<(u64, IdentityRef), GroupElement>,
}

impl EpochState {
    pub fn new(master: MasterSecret) -> Self {
        EpochState {
            epoch: 0,
            master,
            archive: BTreeMap::new(),
        }
    }

    pub fn restore(
        epoch: u64,
        master: MasterSecret,
        archive: BTreeMap<(u64, IdentityRef), GroupElement>,
    ) -> Self {
        EpochState {
            epoch,
            master,
            archive,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn master(&self) -> &MasterSecret {
        &self.master
    }

    pub fn archive(&self) -> &BTreeMap<(u64, IdentityRef), GroupElement> {
        &self.archive
    }

    fn check_current(&self, epoch: u64) -> Result<(), KeyError> {
        match epoch.cmp(&self.epoch) {
            std::cmp::Ordering::Equal => Ok(()),
            std::cmp::Ordering::Less => Err(KeyError::EpochExpired {
                requested: epoch,
                current: self.epoch,
            }),
            std::cmp::Ordering::Greater => Err(KeyError::FutureEpoch {
                requested: epoch,
                current: self.epoch,
            }),
        }
    }

    /// Private shares exist only for the current epoch.
    pub fn private_share(
        &self,
        server_id: &str,
        epoch: u64,
        identity: &IdentityRef,
        params: &GroupParams,
    ) -> Result<KeyShare, KeyError> {
        self.check_current(epoch)?;
        derive_share(server_id, &self.master, epoch, identity, params)
    }

    /// Current-epoch public share, derived on demand. Does not touch the archive.
    pub fn current_public(
        &self,
        identity: &IdentityRef,
        params: &GroupParams,
    ) -> Result<GroupElement, KeyError> {
        let x = derive_scalar(&self.master, self.epoch, identity, params)?;
        Ok(params.exp_secret(&params.generator(), &x))
    }

    /// Public share at `epoch`: derived for the current epoch, archive-only for past ones.
    pub fn public_share_at(
        &self,
        epoch: u64,
        identity: &IdentityRef,
        params: &GroupParams,
    ) -> Result<GroupElement, KeyError> {
        if epoch == self.epoch {
            return self.current_public(identity, params);
        }
        if epoch > self.epoch {
            return Err(KeyError::FutureEpoch {
                requested: epoch,
                current: self.epoch,
            });
        }
        self.archived(epoch, identity)
            .cloned()
            .ok_or_else(|| KeyError::UnknownArchivedKey {
                epoch,
                identity: identity.clone(),
            })
    }

    pub fn archived(&self, epoch: u64, identity: &IdentityRef) -> Option<&GroupElement> {
        self.archive.get(&(epoch, identity.clone()))
    }

    /// Appends to the archive. Returns `true` when the entry is new; an
    /// identical entry is a no-op and a different one is refused.
    pub fn record(
        &mut self,
        epoch: u64,
        identity: &IdentityRef,
        y: GroupElement,
    ) -> Result<bool, KeyError> {
        match self.archive.get(&(epoch, identity.clone())) {
            Some(existing) if *existing == y => Ok(false),
            Some(_) => Err(KeyError::ArchiveConflict {
                epoch,
                identity: identity.clone(),
            }),
            None => {
                self.archive.insert((epoch, identity.clone()), y);
                Ok(true)
            }
        }
    }

    /// Starts the next epoch under `fresh`. The old secret is dropped (and
    /// wiped); the archive carries over unchanged.
    pub fn rotate(self, fresh: MasterSecret) -> EpochState {
        EpochState {
            epoch: self.epoch + 1,
            master: fresh,
            archive: self.archive,
        }
    }
}

/// One line of the append-only archive file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub epoch: u64,
    pub provider: String,
    pub user_id: String,
    pub y_hex: String,
}

impl ArchiveRecord {
    pub fn new(epoch: u64, identity: &IdentityRef, y: &GroupElement, params: &GroupParams) -> Self {
        ArchiveRecord {
            epoch,
            provider: identity.provider.clone(),
            user_id: identity.user_id.clone(),
            y_hex: params.element_to_hex(y),
        }
    }
}

pub fn append_archive(path: &Path, records: &[ArchiveRecord]) -> Result<(), KeyError> {
    if records.is_empty() {
        return Ok(());
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("record serializes"));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))
}

pub fn load_archive(
    path: &Path,
    params: &GroupParams,
) -> Result<BTreeMap<(u64, IdentityRef), GroupElement>, KeyError> {
    let mut archive = BTreeMap::new();
    if !path.exists() {
        return Ok(archive);
    }
    let file = fs::File::open(path).map_err(io_err(path))?;
    let format = |detail: String| KeyError::Format {
        path: path.display().to_string(),
        detail,
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ArchiveRecord =
            serde_json::from_str(&line).map_err(|e| format(format!("line {}: {e}", n + 1)))?;
        let identity = IdentityRef::new(r.provider, r.user_id)?;
        let y = params.element_from_hex(&r.y_hex)?;
        archive.insert((r.epoch, identity), y);
    }
    Ok(archive)
}

#[derive(Serialize, Deserialize)]
struct SecretFile {
    epoch: u64,
    master_secret: String,
}

/// Writes `{"epoch": n, "master_secret": hex}` with owner-only permissions.
pub fn write_secret_file(path: &Path, epoch: u64, master: &MasterSecret) -> Result<(), KeyError> {
    let body = serde_json::to_string(&SecretFile {
        epoch,
        master_secret: master.to_hex(),
    })
    .expect("secret file serializes");
    let tmp = path.with_extension("tmp");
    let mut opts = OpenOptions::new();
    opts.create(true).write(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut file = opts.open(&tmp).map_err(io_err(&tmp))?;
    file.write_all(body.as_bytes()).map_err(io_err(&tmp))?;
    file.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_secret_file(path: &Path) -> Result<(u64, MasterSecret), KeyError> {
    let body = fs::read_to_string(path).map_err(io_err(path))?;
    let file: SecretFile = serde_json::from_str(&body).map_err(|e| KeyError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok((file.epoch, MasterSecret::from_hex(&file.master_secret)?))
}
