//! Runs one key server, mock identity provider or auth provider from a JSON config.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ringauth_core::GroupParams;
use ringauth_service::{
    serve, AuthConfig, AuthProvider, HttpKeyServer, IdpConfig, KeyServer, KeyServerApi,
    KeyServerConfig, MockIdp, ProviderSecrets, SystemClock,
};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "ringauth-server", version, about = "Run a ringauth service")]
struct Cli {
    #[command(subcommand)]
    role: Role,
}

#[derive(Subcommand)]
enum Role {
    /// Key server
    Keyserver {
        #[arg(long)]
        config: PathBuf,
    },
    /// Anonymous login provider
    Auth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mock identity providers
    Idp {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_config<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let body =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))
}

fn load_params(path: Option<&Path>) -> anyhow::Result<GroupParams> {
    Ok(match path {
        Some(p) => GroupParams::load(p)?,
        None => GroupParams::production().clone(),
    })
}

async fn run(router: axum::Router, listen: &str, what: &str) -> anyhow::Result<()> {
    let server = serve::spawn(router, listen).await?;
    tracing::info!("{what} listening on {}", server.url());
    println!("{}", server.url());
    tokio::signal::ctrl_c().await?;
    server.shutdown().await?;
    Ok(())
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let clock = Arc::new(SystemClock);
    match Cli::parse().role {
        Role::Keyserver { config } => {
            let cfg: KeyServerConfig = read_config(&config)?;
            let params = load_params(cfg.params_path.as_deref())?;
            let listen = cfg.listen.clone();
            let ks = Arc::new(KeyServer::open(cfg, params, clock)?);
            run(ks.router(), &listen, "key server").await
        }
        Role::Auth { config } => {
            let cfg: AuthConfig = read_config(&config)?;
            let params = load_params(cfg.params_path.as_deref())?;
            let servers: Vec<Arc<dyn KeyServerApi>> = cfg
                .key_servers
                .iter()
                .map(|u| Arc::new(HttpKeyServer::new(u)) as Arc<dyn KeyServerApi>)
                .collect();
            let listen = cfg.listen.clone();
            let ap = Arc::new(AuthProvider::open(cfg, params, servers, clock)?);
            run(ap.router(), &listen, "auth provider").await
        }
        Role::Idp { config } => {
            let cfg: IdpConfig = read_config(&config)?;
            let secrets = ProviderSecrets::from_hex_map(&cfg.providers)?;
            let idp = Arc::new(MockIdp::new(secrets, cfg.display_names.clone(), clock));
            run(idp.router(), &cfg.listen, "identity provider").await
        }
    }
}
