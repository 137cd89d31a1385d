//! On-disk formats: client config, keyring and ring files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ringauth_core::{GroupElement, GroupParams, IdentityRef, Ring, Scalar};
use ringauth_service::wire::RingMember;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn default_ttl() -> u64 {
    300
}

/// Where the services live. Written by `harness-up`, read via `--config`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientConfig {
    #[serde(default)]
    pub key_servers: Vec<String>,
    /// Provider name to mock provider base URL.
    #[serde(default)]
    pub idps: BTreeMap<String, String>,
    #[serde(default)]
    pub auth: Option<String>,
    #[serde(default)]
    pub params_path: Option<PathBuf>,
    #[serde(default)]
    pub scope: Option<String>,
    #[serde(default = "default_ttl")]
    pub token_ttl: u64,
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let body = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Writes via a temp file and rename; `private` restricts the mode to 0600.
pub fn write_json<T: Serialize>(path: &Path, value: &T, private: bool) -> Result<(), CliError> {
    let mut body = serde_json::to_vec_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    body.push(b'\n');
    write_atomic(path, &body, private)
}

pub fn write_atomic(path: &Path, body: &[u8], private: bool) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    if private {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    #[cfg(not(unix))]
    let _ = private;
    let mut file = opts.open(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    file.write_all(body).map_err(|e| CliError::io(&tmp, e))?;
    file.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// A client's composite key. Holds the private scalar, so it is written 0600.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyringFile {
    pub identities: Vec<IdentityRef>,
    pub epoch: u64,
    pub x_c: String,
    pub y_c: String,
    pub server_set_fingerprint: String,
}

impl KeyringFile {
    pub fn new(
        identities: Vec<IdentityRef>,
        epoch: u64,
        x_c: &Scalar,
        y_c: &GroupElement,
        server_set_fingerprint: String,
        params: &GroupParams,
    ) -> Self {
        KeyringFile {
            identities,
            epoch,
            x_c: params.scalar_to_hex(x_c),
            y_c: params.element_to_hex(y_c),
            server_set_fingerprint,
        }
    }

    /// Parses both keys and checks `g^x_c = Y_c`.
    pub fn keys(&self, params: &GroupParams) -> Result<(Scalar, GroupElement), CliError> {
        let x = params.scalar_from_hex(&self.x_c)?;
        let y = params.element_from_hex(&self.y_c)?;
        if params.exp_secret(&params.generator(), &x) != y {
            return Err(CliError::Malformed(
                "keyring private and public keys do not match".into(),
            ));
        }
        Ok((x, y))
    }

    pub fn member(&self) -> Option<RingMember> {
        RingMember::new(self.identities.clone())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_json(path, self, true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingEntry {
    pub member: RingMember,
    pub y_hex: String,
}

/// A ring with the directory keys it was built from, sorted by key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingFile {
    pub epoch: u64,
    pub members: Vec<RingEntry>,
}

impl RingFile {
    pub fn new(epoch: u64, mut members: Vec<RingEntry>) -> Self {
        members.sort_by(|a, b| a.y_hex.cmp(&b.y_hex));
        RingFile { epoch, members }
    }

    pub fn ring(&self, params: &GroupParams) -> Result<Ring, CliError> {
        let keys = self
            .members
            .iter()
            .map(|m| params.element_from_hex(&m.y_hex))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Ring::new(keys, params)?)
    }

    pub fn member_list(&self) -> Vec<RingMember> {
        self.members.iter().map(|m| m.member.clone()).collect()
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write_json(path, self, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyring_roundtrip_and_mode() {
        let params = GroupParams::toy();
        let x = params.scalar_from_u64(3);
        let y = params.exp_g(&x);
        let kr = KeyringFile::new(
            vec!["mockbook:alice".parse().unwrap()],
            0,
            &x,
            &y,
            "ab".into(),
            params,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keyring.json");
        kr.save(&path).unwrap();
        assert_eq!(KeyringFile::load(&path).unwrap(), kr);
        assert_eq!(kr.keys(params).unwrap(), (x, y));
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let mode = std::fs::metadata(&path).unwrap().permissions().mode();
            assert_eq!(mode & 0o777, 0o600);
        }

        let mut bad = kr.clone();
        bad.x_c = params.scalar_to_hex(&params.scalar_from_u64(4));
        assert!(bad.keys(params).is_err());
    }

    #[test]
    fn ring_file_is_sorted_by_key() {
        let params = GroupParams::toy();
        let entry = |who: &str, x: u64| RingEntry {
            member: who.parse().unwrap(),
            y_hex: params.element_to_hex(&params.exp_g(&params.scalar_from_u64(x))),
        };
        let a = RingFile::new(0, vec![entry("p:a", 1), entry("p:b", 2), entry("p:c", 3)]);
        let b = RingFile::new(0, vec![entry("p:c", 3), entry("p:a", 1), entry("p:b", 2)]);
        assert_eq!(a, b);
        assert_eq!(
            a.ring(params).unwrap().descriptor(),
            b.ring(params).unwrap().descriptor()
        );
    }
}
