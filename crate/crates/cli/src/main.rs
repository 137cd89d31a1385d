use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use rand::rngs::OsRng;
use ringauth_cli::harness::{self, Harness, HarnessOptions};
use ringauth_cli::ops::{self, IdpDirectory};
use ringauth_cli::{bench, files, CliError, ClientConfig, KeyringFile, RingFile};
use ringauth_core::{group, GroupParams, IdentityRef};
use ringauth_service::wire::RingMember;
use ringauth_service::{HttpAuth, HttpKeyServer, KeyServerApi};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ringauth", version, about = "Anonymous group authentication client")]
struct Cli {
    /// Client config file (as written by harness-up).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Group parameter file; the built-in production group by default.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// Comma-separated key server URLs, overriding the config.
    #[arg(long, global = true, value_delimiter = ',')]
    servers: Option<Vec<String>>,
    /// Linkability scope for signatures.
    #[arg(long, global = true)]
    scope: Option<String>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fresh parameter set from a seed.
    ParamsGen {
        #[arg(long, default_value_t = 256)]
        q_bits: u64,
        #[arg(long, default_value_t = 2048)]
        p_bits: u64,
        #[arg(long)]
        seed: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a local deployment until harness-down.
    HarnessUp {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        key_servers: usize,
        #[arg(long, value_delimiter = ',', default_value = "mockbook,mockpal")]
        providers: Vec<String>,
        /// Derive all secrets from this string.
        #[arg(long)]
        seed: Option<String>,
        #[arg(long, default_value = "wiki")]
        service: String,
    },
    /// Stop the deployment running in a directory. Safe to repeat.
    HarnessDown {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Ask a key server to invite accounts.
    Invite {
        #[arg(long = "to", required = true)]
        to: Vec<IdentityRef>,
        /// Which configured key server sends the invitations.
        #[arg(long, default_value_t = 0)]
        server_index: usize,
    },
    /// Collect and combine key shares for one or more accounts.
    CollectKey {
        #[arg(long = "account", required = true)]
        accounts: Vec<IdentityRef>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Look up a member's combined public key.
    Pubkey {
        #[arg(long)]
        member: RingMember,
        #[arg(long)]
        epoch: Option<u64>,
    },
    /// Build a ring from the key servers' directories.
    RingBuild {
        #[arg(long = "member", required = true)]
        members: Vec<RingMember>,
        #[arg(long)]
        epoch: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sign a document, writing a detached signature.
    Sign {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        ring: PathBuf,
        #[arg(long)]
        keyring: PathBuf,
        /// Defaults to the document path with `.sig` appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a detached document signature.
    Verify {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        sig: PathBuf,
        #[arg(long)]
        ring: PathBuf,
    },
    /// Log in to the auth provider anonymously.
    Login {
        /// Ring file whose members form the anonymity set.
        #[arg(long, conflicts_with = "members")]
        ring: Option<PathBuf>,
        #[arg(long = "member")]
        members: Vec<RingMember>,
        #[arg(long)]
        keyring: PathBuf,
        #[arg(long)]
        auth: Option<String>,
    },
    /// Show the pseudonym and anonymity set behind a token.
    Introspect {
        #[arg(long)]
        token: String,
        #[arg(long)]
        auth: Option<String>,
    },
    /// Block a pseudonym (local admin).
    Block {
        #[arg(long)]
        pseudonym: String,
        #[arg(long)]
        auth: Option<String>,
    },
    /// Lift a block (local admin).
    Unblock {
        #[arg(long)]
        pseudonym: String,
        #[arg(long)]
        auth: Option<String>,
    },
    /// Start a new epoch on every key server (local admin).
    Rotate,
    /// Time signing and verification across ring sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128,256,512,1024")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out_json: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
}

struct Context {
    config: ClientConfig,
    params: GroupParams,
    scope: Option<String>,
    json: bool,
}

impl Context {
    fn load(cli: &Cli) -> Result<Self, CliError> {
        let mut config: ClientConfig = match &cli.config {
            Some(path) => files::read_json(path)?,
            None => ClientConfig::default(),
        };
        if let Some(servers) = &cli.servers {
            config.key_servers = servers.clone();
        }
        let params_path = cli.params.clone().or_else(|| config.params_path.clone());
        let params = match params_path {
            Some(path) => GroupParams::load(&path)?,
            None => GroupParams::production().clone(),
        };
        Ok(Context {
            scope: cli.scope.clone().or_else(|| config.scope.clone()),
            config,
            params,
            json: cli.json,
        })
    }

    fn servers(&self) -> Result<Vec<Arc<dyn KeyServerApi>>, CliError> {
        if self.config.key_servers.is_empty() {
            return Err(CliError::Usage(
                "no key servers: pass --servers or --config".into(),
            ));
        }
        Ok(self
            .config
            .key_servers
            .iter()
            .map(|u| Arc::new(HttpKeyServer::new(u)) as Arc<dyn KeyServerApi>)
            .collect())
    }

    fn auth(&self, flag: &Option<String>) -> Result<HttpAuth, CliError> {
        flag.as_ref()
            .or(self.config.auth.as_ref())
            .map(|u| HttpAuth::new(u))
            .ok_or_else(|| CliError::Usage("no auth provider: pass --auth or --config".into()))
    }

    /// Prints `value` as JSON, or `text` otherwise.
    fn emit(&self, value: serde_json::Value, text: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            println!("{}", text());
        }
    }
}

fn member_list(members: &[RingMember]) -> String {
    members
        .iter()
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

async fn harness_up(opts: HarnessOptions, ctx: &Context) -> Result<(), CliError> {
    let harness = Harness::start(opts).await?;
    ctx.emit(serde_json::to_value(&harness.info).expect("info serializes"), || {
        let mut lines = vec![format!("harness up in {}", harness.dir().display())];
        for ks in &harness.info.key_servers {
            lines.push(format!("  key server {} {}", ks.id, ks.url));
        }
        for (p, url) in &harness.info.idps {
            lines.push(format!("  provider {p} {url}"));
        }
        lines.push(format!("  auth {} (scope {})", harness.info.auth, harness.info.scope));
        lines.join("\n")
    });
    tokio::select! {
        _ = harness.wait_for_stop_file() => {}
        _ = tokio::signal::ctrl_c() => {}
    }
    harness.stop().await
}

async fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Context::load(&cli)?;
    let params = &ctx.params;
    match cli.command {
        Command::ParamsGen {
            q_bits,
            p_bits,
            seed,
            out,
        } => {
            let generated = group::generate_params(q_bits, p_bits, seed.as_bytes())?;
            files::write_atomic(&out, generated.to_json().as_bytes(), false)?;
            ctx.emit(
                json!({"path": out, "fingerprint": generated.fingerprint()}),
                || format!("wrote {} (fingerprint {})", out.display(), generated.fingerprint()),
            );
        }
        Command::HarnessUp {
            dir,
            key_servers,
            providers,
            seed,
            service,
        } => {
            let mut opts = HarnessOptions::new(dir);
            opts.servers = key_servers;
            opts.providers = providers;
            opts.seed = seed.map(String::into_bytes);
            opts.service_name = service;
            opts.params = params.clone();
            opts.params_path = cli.params.clone().map(|p| absolute(&p));
            harness_up(opts, &ctx).await?;
        }
        Command::HarnessDown { dir } => {
            let stopped = harness::request_stop(&dir, Duration::from_secs(30)).await?;
            ctx.emit(json!({"stopped": stopped}), || {
                if stopped {
                    "harness stopped".into()
                } else {
                    "no harness running".into()
                }
            });
        }
        Command::Invite { to, server_index } => {
            let servers = ctx.servers()?;
            let server = servers.get(server_index).ok_or_else(|| {
                CliError::Usage(format!("only {} key servers configured", servers.len()))
            })?;
            let resp = server.request_invitations(to.clone()).await?;
            ctx.emit(json!({"batch_id": resp.batch_id, "invited": to.len()}), || {
                format!("invited {} accounts (batch {})", to.len(), resp.batch_id)
            });
        }
        Command::CollectKey { accounts, out } => {
            let servers = ctx.servers()?;
            let idps = IdpDirectory::new(&ctx.config.idps, ctx.config.token_ttl);
            let report = ops::collect_key(&accounts, &servers, &idps, params).await?;
            report.keyring.save(&out)?;
            ctx.emit(
                json!({
                    "path": out,
                    "epoch": report.keyring.epoch,
                    "y_c": report.keyring.y_c,
                    "token_secs": report.token_secs,
                    "share_secs": report.share_secs,
                }),
                || {
                    format!(
                        "wrote {} for epoch {} (tokens {:.3}s, shares {:.3}s)",
                        out.display(),
                        report.keyring.epoch,
                        report.token_secs,
                        report.share_secs
                    )
                },
            );
        }
        Command::Pubkey { member, epoch } => {
            let servers = ctx.servers()?;
            let (epoch, y) = ops::member_key(&member, &servers, epoch, params).await?;
            let y = params.element_to_hex(&y);
            ctx.emit(json!({"member": member.to_string(), "epoch": epoch, "y_hex": y}), || y.clone());
        }
        Command::RingBuild {
            members,
            epoch,
            out,
        } => {
            let servers = ctx.servers()?;
            let ring = ops::build_ring(&members, &servers, epoch, params).await?;
            ring.save(&out)?;
            ctx.emit(
                json!({"path": out, "epoch": ring.epoch, "members": ring.members.len()}),
                || {
                    format!(
                        "wrote {} ({} members, epoch {}): {}",
                        out.display(),
                        ring.members.len(),
                        ring.epoch,
                        member_list(&ring.member_list())
                    )
                },
            );
        }
        Command::Sign {
            file,
            ring,
            keyring,
            out,
        } => {
            let ring = RingFile::load(&ring)?;
            let keyring = KeyringFile::load(&keyring)?;
            let scope = ctx.scope.clone().unwrap_or_default();
            let signed = ops::sign_document(&file, &ring, &keyring, scope.as_bytes(), params)?;
            let out = out.unwrap_or_else(|| {
                let mut name = file.clone().into_os_string();
                name.push(".sig");
                PathBuf::from(name)
            });
            files::write_atomic(&out, &signed.detached, false)?;
            if signed.lone_signer {
                eprintln!("warning: the ring has one member, so the signature is not anonymous");
            }
            ctx.emit(
                json!({"path": out, "anonymity_set": signed.anonymity_set}),
                || {
                    format!(
                        "wrote {}; anonymity set: {}",
                        out.display(),
                        member_list(&signed.anonymity_set)
                    )
                },
            );
        }
        Command::Verify { file, sig, ring } => {
            let ring = RingFile::load(&ring)?;
            let detached = std::fs::read(&sig).map_err(|e| CliError::io(&sig, e))?;
            let report = ops::verify_document(&file, &detached, &ring, params)?;
            ctx.emit(serde_json::to_value(&report).expect("report serializes"), || {
                if report.accepted {
                    format!(
                        "valid signature by a member of: {}\npseudonym {}",
                        member_list(&report.anonymity_set),
                        report.pseudonym.as_deref().unwrap_or_default()
                    )
                } else {
                    "INVALID signature".into()
                }
            });
            if !report.accepted {
                return Err(CliError::Rejected("signature does not verify".into()));
            }
        }
        Command::Login {
            ring,
            members,
            keyring,
            auth,
        } => {
            let members = match ring {
                Some(path) => RingFile::load(&path)?.member_list(),
                None => members,
            };
            if members.is_empty() {
                return Err(CliError::Usage("pass --ring or at least one --member".into()));
            }
            let keyring = KeyringFile::load(&keyring)?;
            let auth = ctx.auth(&auth)?;
            let servers = ctx.servers()?;
            let token = ops::login(
                &auth,
                &members,
                &servers,
                &keyring,
                ctx.scope.as_deref(),
                params,
            )
            .await?;
            ctx.emit(serde_json::to_value(&token).expect("token serializes"), || {
                format!("token {}\npseudonym {}", token.token, token.pseudonym)
            });
        }
        Command::Introspect { token, auth } => {
            let view = ctx.auth(&auth)?.introspect(&token).await?;
            ctx.emit(serde_json::to_value(&view).expect("view serializes"), || {
                format!(
                    "pseudonym {}\nanonymity set: {}\nissued at {}",
                    view.pseudonym,
                    member_list(&view.ring_identities),
                    view.issued_at
                )
            });
        }
        Command::Block { pseudonym, auth } => {
            ctx.auth(&auth)?.block(&pseudonym).await?;
            ctx.emit(json!({"blocked": pseudonym}), || format!("blocked {pseudonym}"));
        }
        Command::Unblock { pseudonym, auth } => {
            ctx.auth(&auth)?.unblock(&pseudonym).await?;
            ctx.emit(json!({"unblocked": pseudonym}), || format!("unblocked {pseudonym}"));
        }
        Command::Rotate => {
            let servers = ctx.servers()?;
            let infos = futures::future::try_join_all(servers.iter().map(|s| s.rotate())).await?;
            ctx.emit(serde_json::to_value(&infos).expect("infos serialize"), || {
                infos
                    .iter()
                    .map(|i| format!("{} now at epoch {}", i.server_id, i.epoch))
                    .collect::<Vec<_>>()
                    .join("\n")
            });
        }
        Command::Bench {
            sizes,
            reps,
            out_json,
            out_csv,
        } => {
            let params = params.clone();
            let report = tokio::task::spawn_blocking(move || {
                bench::run(&sizes, reps, &params, &mut OsRng)
            })
            .await
            .map_err(|e| CliError::Crypto(e.to_string()))??;
            if let Some(path) = &out_json {
                files::write_json(path, &report, false)?;
            }
            if let Some(path) = &out_csv {
                files::write_atomic(path, report.to_csv().as_bytes(), false)?;
            }
            ctx.emit(serde_json::to_value(&report).expect("report serializes"), || {
                let mut text = report.to_csv();
                for (name, fit) in [
                    ("sign", report.sign_fit),
                    ("verify", report.verify_fit),
                    ("size", report.size_fit),
                ] {
                    text.push_str(&format!(
                        "{name}: slope {:.6e} intercept {:.6e} r2 {:.4}\n",
                        fit.slope, fit.intercept, fit.r2
                    ));
                }
                text.trim_end().to_string()
            });
        }
    }
    Ok(())
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let json = cli.json;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            if json {
                eprintln!(
                    "{}",
                    json!({
                        "error": e.service_code().map(|c| c.as_str()),
                        "detail": e.to_string(),
                        "exit_code": code,
                    })
                );
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code as u8)
        }
    }
}
