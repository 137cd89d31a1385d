//! A complete local deployment in one process: key servers, one mock
//! provider service per provider, and the auth provider, all on ephemeral
//! localhost ports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::rngs::OsRng;
use rand::RngCore;
use ringauth_core::GroupParams;
use ringauth_service::serve::{self, RunningServer};
use ringauth_service::{
    AuthConfig, AuthProvider, HttpKeyServer, KeyServer, KeyServerApi, KeyServerConfig, MockIdp,
    ProviderSecrets, SystemClock,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::files::{read_json, write_json, ClientConfig};

pub const INFO_FILE: &str = "harness.json";
pub const CLIENT_FILE: &str = "client.json";
pub const STOP_FILE: &str = "stop";

/// Users every mock provider knows by display name.
pub const FIXTURE_USERS: [(&str, &str); 5] = [
    ("alice", "Alice"),
    ("bob", "Bob"),
    ("charles", "Charles"),
    ("dave", "Dave"),
    ("erin", "Erin"),
];

#[derive(Debug, Clone)]
pub struct HarnessOptions {
    pub dir: PathBuf,
    pub servers: usize,
    pub providers: Vec<String>,
    /// Derives every secret deterministically when set.
    pub seed: Option<Vec<u8>>,
    pub service_name: String,
    pub params: GroupParams,
    /// Written into the client config so clients load the same group.
    pub params_path: Option<PathBuf>,
}

impl HarnessOptions {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        HarnessOptions {
            dir: dir.into(),
            servers: 3,
            providers: vec!["mockbook".into(), "mockpal".into()],
            seed: None,
            service_name: "wiki".into(),
            params: GroupParams::production().clone(),
            params_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyServerEntry {
    pub id: String,
    pub url: String,
    pub outbox: PathBuf,
}

/// Contents of `harness.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarnessInfo {
    pub key_servers: Vec<KeyServerEntry>,
    pub idps: BTreeMap<String, String>,
    pub auth: String,
    pub scope: String,
    pub params_fingerprint: String,
    pub pid: u32,
}

pub struct Harness {
    pub info: HarnessInfo,
    pub client: ClientConfig,
    pub key_servers: Vec<Arc<KeyServer>>,
    pub auth: Arc<AuthProvider>,
    dir: PathBuf,
    // Start order; stopped in reverse.
    running: Vec<RunningServer>,
}

fn secret(seed: Option<&[u8]>, label: &str) -> [u8; 32] {
    match seed {
        Some(seed) => {
            let mut h = Sha256::new();
            h.update(b"ringauth-harness");
            h.update(seed);
            h.update(label.as_bytes());
            h.finalize().into()
        }
        None => {
            let mut out = [0u8; 32];
            OsRng.fill_bytes(&mut out);
            out
        }
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

impl Harness {
    pub async fn start(opts: HarnessOptions) -> Result<Harness, CliError> {
        if opts.servers == 0 || opts.providers.is_empty() {
            return Err(CliError::Usage(
                "the harness needs at least one key server and one provider".into(),
            ));
        }
        std::fs::create_dir_all(&opts.dir).map_err(io(&opts.dir))?;
        let stop = opts.dir.join(STOP_FILE);
        if stop.exists() {
            std::fs::remove_file(&stop).map_err(io(&stop))?;
        }
        let seed = opts.seed.as_deref();
        let clock = Arc::new(SystemClock);
        let mut running = Vec::new();

        let provider_hex: BTreeMap<String, String> = opts
            .providers
            .iter()
            .map(|p| (p.clone(), hex::encode(secret(seed, &format!("provider:{p}")))))
            .collect();
        let display_names: BTreeMap<String, String> = FIXTURE_USERS
            .iter()
            .map(|(u, d)| (u.to_string(), d.to_string()))
            .collect();

        let mut idps = BTreeMap::new();
        for p in &opts.providers {
            let mut secrets = ProviderSecrets::new();
            secrets.insert(p.clone(), hex::decode(&provider_hex[p]).expect("own hex"));
            let idp = Arc::new(MockIdp::new(secrets, display_names.clone(), clock.clone()));
            let server = serve::spawn(idp.router(), "127.0.0.1:0")
                .await
                .map_err(io(&opts.dir))?;
            idps.insert(p.clone(), server.url());
            running.push(server);
        }

        let mut key_servers = Vec::new();
        let mut entries = Vec::new();
        for i in 1..=opts.servers {
            let id = format!("ks{i}");
            let dir = opts.dir.join(&id);
            std::fs::create_dir_all(&dir).map_err(io(&dir))?;
            let mut cfg = KeyServerConfig::new(&id, provider_hex.clone());
            cfg.state_path = Some(dir.join("state.json"));
            cfg.archive_path = Some(dir.join("archive.jsonl"));
            cfg.outbox_path = Some(dir.join("outbox.jsonl"));
            cfg.initial_secret_hex = Some(hex::encode(secret(seed, &format!("epoch0:{id}"))));
            let outbox = dir.join("outbox.jsonl");
            let ks = Arc::new(
                KeyServer::open(cfg, opts.params.clone(), clock.clone())
                    .map_err(|e| CliError::Config(e.to_string()))?,
            );
            let server = serve::spawn(ks.clone().router(), "127.0.0.1:0")
                .await
                .map_err(io(&opts.dir))?;
            entries.push(KeyServerEntry {
                id,
                url: server.url(),
                outbox,
            });
            key_servers.push(ks);
            running.push(server);
        }

        let urls: Vec<String> = entries.iter().map(|e| e.url.clone()).collect();
        let mut auth_cfg = AuthConfig::new(&opts.service_name, urls.clone());
        auth_cfg.token_log = Some(opts.dir.join("tokens.jsonl"));
        auth_cfg.block_log = Some(opts.dir.join("blocks.jsonl"));
        let apis: Vec<Arc<dyn KeyServerApi>> = urls
            .iter()
            .map(|u| Arc::new(HttpKeyServer::new(u)) as Arc<dyn KeyServerApi>)
            .collect();
        let scope = auth_cfg.effective_scope();
        let auth = Arc::new(
            AuthProvider::open(auth_cfg, opts.params.clone(), apis, clock)
                .map_err(|e| CliError::Config(e.to_string()))?,
        );
        let server = serve::spawn(auth.clone().router(), "127.0.0.1:0")
            .await
            .map_err(io(&opts.dir))?;
        let auth_url = server.url();
        running.push(server);

        let info = HarnessInfo {
            key_servers: entries,
            idps: idps.clone(),
            auth: auth_url.clone(),
            scope,
            params_fingerprint: opts.params.fingerprint(),
            pid: std::process::id(),
        };
        let client = ClientConfig {
            key_servers: urls,
            idps,
            auth: Some(auth_url),
            params_path: opts.params_path.clone(),
            scope: None,
            token_ttl: 300,
        };
        // harness.json goes last: its presence means everything is up.
        write_json(&opts.dir.join(CLIENT_FILE), &client, false)?;
        write_json(&opts.dir.join(INFO_FILE), &info, false)?;
        Ok(Harness {
            info,
            client,
            key_servers,
            auth,
            dir: opts.dir,
            running,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Resolves once `stop` appears in the harness directory.
    pub async fn wait_for_stop_file(&self) {
        let stop = self.dir.join(STOP_FILE);
        while !stop.exists() {
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
    }

    /// Stops services in reverse start order and removes the marker files.
    pub async fn stop(mut self) -> Result<(), CliError> {
        while let Some(server) = self.running.pop() {
            server.shutdown().await.map_err(io(&self.dir))?;
        }
        for name in [INFO_FILE, STOP_FILE] {
            let path = self.dir.join(name);
            if path.exists() {
                std::fs::remove_file(&path).map_err(io(&path))?;
            }
        }
        Ok(())
    }
}

/// Asks a running `harness-up` in `dir` to stop and waits for it.
/// Returns false when nothing was running.
pub async fn request_stop(dir: &Path, timeout: Duration) -> Result<bool, CliError> {
    let info = dir.join(INFO_FILE);
    if !info.exists() {
        return Ok(false);
    }
    let _: HarnessInfo = read_json(&info)?;
    let stop = dir.join(STOP_FILE);
    std::fs::write(&stop, b"").map_err(io(&stop))?;
    let deadline = tokio::time::Instant::now() + timeout;
    while info.exists() {
        if tokio::time::Instant::now() >= deadline {
            return Err(CliError::Config(format!(
                "harness in {} did not stop within {timeout:?}",
                dir.display()
            )));
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    Ok(true)
}
