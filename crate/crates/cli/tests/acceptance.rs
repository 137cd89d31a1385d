//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any failed.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use ringauth_cli::bench;
use ringauth_cli::harness::{Harness, HarnessOptions};
use ringauth_cli::ops::{self, IdpDirectory, TokenSource};
use ringauth_core::pkg::{self, ShamirShare};
use ringauth_core::{keyshare, lrs, GroupParams, IdentityRef, Ring, Scalar};
use ringauth_service::idp::issue_token;
use ringauth_service::wire::{LoginRequest, RingMember};
use ringauth_service::{
    AuthConfig, AuthProvider, Clock, ErrorCode, HttpKeyServer, KeyServer, KeyServerApi,
    KeyServerConfig, ManualClock, ProviderSecrets,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("runtime")
}

/// Modular exponentiation on machine words, independent of the library.
fn pow_mod(base: u64, mut exp: u64, m: u64) -> u64 {
    let (mut acc, mut b) = (1u64, base % m);
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % m;
        }
        b = b * b % m;
        exp >>= 1;
    }
    acc
}

// Toy group constants, independent of the library's parameter file.
const TOY_P: u64 = 23;
const TOY_Q: u64 = 11;
const TOY_G: u64 = 4;

/// Reads a toy-sized library value as a machine word via its hex form.
fn word(hex: &str) -> u64 {
    u64::from_str_radix(hex, 16).expect("toy value fits a word")
}

fn scalar_word(s: &Scalar, params: &GroupParams) -> u64 {
    word(&params.scalar_to_hex(s))
}

fn element_word(e: &ringauth_core::GroupElement, params: &GroupParams) -> u64 {
    word(&params.element_to_hex(e))
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Outcome {
    let params = GroupParams::production();
    let mut rng = StdRng::seed_from_u64(0xC1);
    let scope = b"acceptance";
    let started = Instant::now();
    let mut signed = 0;
    for &n in &[1usize, 2, 3, 4, 8, 16, 64] {
        let xs: Vec<Scalar> = (0..n).map(|_| params.random_nonzero_scalar(&mut rng)).collect();
        let ring = Ring::new(xs.iter().map(|x| lrs::public_key(x, params)).collect(), params)
            .map_err(|e| e.to_string())?;
        for x in &xs {
            let idx = ring.position(&lrs::public_key(x, params)).expect("member");
            let msg = format!("message for {n}/{idx}");
            let sig = lrs::sign(msg.as_bytes(), &ring, idx, x, scope, params, &mut rng)
                .map_err(|e| e.to_string())?;
            let ok = lrs::verify(msg.as_bytes(), &ring, &sig, params)
                .map_err(|e| e.to_string())?
                .accepted;
            ensure(ok, || format!("honest signature rejected at n={n}, signer {idx}"))?;
            signed += 1;
        }
    }

    // Mutations on smaller rings keep the runtime bounded.
    let mut mutated = 0;
    let mut rejected = 0;
    let mut rings = Vec::new();
    for &n in &[1usize, 2, 3, 4, 8, 16] {
        let xs: Vec<Scalar> = (0..n).map(|_| params.random_nonzero_scalar(&mut rng)).collect();
        let ring = Ring::new(xs.iter().map(|x| lrs::public_key(x, params)).collect(), params)
            .map_err(|e| e.to_string())?;
        rings.push((ring, xs));
    }
    while mutated < 600 {
        let (ring, xs) = &rings[rng.gen_range(0..rings.len())];
        let x = &xs[rng.gen_range(0..xs.len())];
        let idx = ring.position(&lrs::public_key(x, params)).expect("member");
        let msg: Vec<u8> = (0..32).map(|_| rng.gen()).collect();
        let sig = lrs::sign(&msg, ring, idx, x, scope, params, &mut rng).map_err(|e| e.to_string())?;
        let mut bytes = lrs::encode(&sig, params);
        let mut msg2 = msg.clone();
        let flip: u8 = rng.gen_range(1..=255);
        if rng.gen_bool(0.25) {
            let i = rng.gen_range(0..msg2.len());
            msg2[i] ^= flip;
        } else {
            let i = rng.gen_range(0..bytes.len());
            bytes[i] ^= flip;
        }
        mutated += 1;
        let accepted = match lrs::decode(&bytes, params) {
            Err(_) => false,
            Ok(s) => matches!(lrs::verify(&msg2, ring, &s, params), Ok(o) if o.accepted),
        };
        if !accepted {
            rejected += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(rejected == mutated, || {
        format!("{} of {mutated} mutations accepted", mutated - rejected)
    })?;
    ensure(secs <= 120.0, || format!("took {secs:.1}s, limit 120s"))?;
    Ok(format!(
        "{signed} honest signatures accepted, {rejected}/{mutated} mutations rejected, {secs:.1}s"
    ))
}

// ---------------------------------------------------------------- shared deployment

const NOW: u64 = 1_700_000_000;

fn provider_hex() -> std::collections::BTreeMap<String, String> {
    [("mockbook", [3u8; 32]), ("mockpal", [5u8; 32])]
        .into_iter()
        .map(|(p, s)| (p.to_string(), hex::encode(s)))
        .collect()
}

struct InProcess {
    params: GroupParams,
    clock: Arc<ManualClock>,
    servers: Vec<Arc<KeyServer>>,
    apis: Vec<Arc<dyn KeyServerApi>>,
    auth: AuthProvider,
}

impl InProcess {
    fn new(params: &GroupParams, n: usize) -> Self {
        let clock = Arc::new(ManualClock::new(NOW));
        let servers: Vec<Arc<KeyServer>> = (1..=n)
            .map(|i| {
                let cfg = KeyServerConfig::new(format!("ks{i}"), provider_hex());
                Arc::new(KeyServer::open(cfg, params.clone(), clock.clone()).expect("server"))
            })
            .collect();
        let apis: Vec<Arc<dyn KeyServerApi>> = servers
            .iter()
            .map(|s| Arc::new(s.clone()) as Arc<dyn KeyServerApi>)
            .collect();
        let auth = AuthProvider::open(
            AuthConfig::new("wiki", vec![]),
            params.clone(),
            apis.clone(),
            clock.clone() as Arc<dyn Clock>,
        )
        .expect("auth");
        InProcess {
            params: params.clone(),
            clock,
            servers,
            apis,
            auth,
        }
    }
}

struct DirectTokens {
    secrets: ProviderSecrets,
    now: u64,
}

#[async_trait::async_trait]
impl TokenSource for DirectTokens {
    async fn token(
        &self,
        account: &IdentityRef,
        audience: &str,
    ) -> Result<ringauth_service::IdpToken, ringauth_cli::CliError> {
        Ok(issue_token(
            &self.secrets,
            &account.provider,
            &account.user_id,
            &account.user_id,
            audience,
            600,
            self.now,
        )
        .expect("known provider"))
    }
}

fn direct_tokens() -> DirectTokens {
    DirectTokens {
        secrets: ProviderSecrets::from_hex_map(&provider_hex()).expect("hex"),
        now: NOW,
    }
}

async fn login_once(
    d: &InProcess,
    me: &RingMember,
    x: &Scalar,
    members: &[RingMember],
) -> Result<String, String> {
    let ch = d.auth.create_challenge();
    let nonce = hex::decode(&ch.nonce).map_err(|e| e.to_string())?;
    let keys = d.auth.member_keys(members).await.map_err(|e| e.to_string())?;
    let ring = Ring::new(keys, &d.params).map_err(|e| e.to_string())?;
    let y = lrs::public_key(x, &d.params);
    let idx = ring.position(&y).ok_or_else(|| format!("{me} not in ring"))?;
    let sig = lrs::sign(&nonce, &ring, idx, x, ch.scope.as_bytes(), &d.params, &mut rand::rngs::OsRng)
        .map_err(|e| e.to_string())?;
    let req = LoginRequest {
        challenge_id: ch.challenge_id,
        identities: members.to_vec(),
        sig_hex: hex::encode(lrs::encode(&sig, &d.params)),
        ring: None,
    };
    d.auth
        .verify_login(&req)
        .await
        .map(|t| t.pseudonym)
        .map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    runtime().block_on(async {
        let d = InProcess::new(GroupParams::production(), 3);
        let tokens = direct_tokens();
        let users: Vec<RingMember> = (0..12)
            .map(|i| format!("mockbook:user{i}").parse().expect("member"))
            .collect();
        let mut keys = Vec::new();
        for u in &users[..8] {
            let r = ops::collect_key(u.accounts(), &d.apis, &tokens, &d.params)
                .await
                .map_err(|e| e.to_string())?;
            let x = d.params.scalar_from_hex(&r.keyring.x_c).map_err(|e| e.to_string())?;
            keys.push(x);
        }

        let mut rng = StdRng::seed_from_u64(0xC2);
        let mut seen = BTreeSet::new();
        let mut ring_shapes = BTreeSet::new();
        for _ in 0..100 {
            let mut ring = vec![users[0].clone()];
            for u in &users[1..] {
                if rng.gen_bool(0.4) {
                    ring.push(u.clone());
                }
            }
            let mut shape: Vec<String> = ring.iter().map(|m| m.to_string()).collect();
            shape.sort();
            ring_shapes.insert(shape);
            seen.insert(login_once(&d, &users[0], &keys[0], &ring).await?);
        }
        ensure(seen.len() == 1, || format!("{} pseudonyms from one key", seen.len()))?;

        let ring: Vec<RingMember> = users[..8].to_vec();
        let mut distinct = BTreeSet::new();
        for (u, x) in users[..8].iter().zip(&keys) {
            distinct.insert(login_once(&d, u, x, &ring).await?);
        }
        ensure(distinct.len() == 8, || {
            format!("8 members gave {} pseudonyms", distinct.len())
        })?;
        Ok(format!(
            "100 logins over {} distinct rings gave 1 pseudonym; 8 members gave 8",
            ring_shapes.len()
        ))
    })
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let params = GroupParams::toy();
    ensure(
        (params.p().to_string(), params.q().to_string(), params.generator().value().to_string())
            == (TOY_P.to_string(), TOY_Q.to_string(), TOY_G.to_string()),
        || "toy parameters differ from p=23, q=11, g=4".into(),
    )?;
    let mut checked = 0;
    for n in 1..=3u32 {
        for code in 0..11u64.pow(n) {
            let xs: Vec<u64> = (0..n).map(|i| code / 11u64.pow(i) % 11).collect();
            let scalars: Vec<Scalar> = xs.iter().map(|&x| params.scalar_from_u64(x)).collect();
            let ys: Vec<_> = scalars.iter().map(|x| params.exp_g(x)).collect();
            let lhs = params.exp_g(&keyshare::combine_private(&scalars, params).map_err(|e| e.to_string())?);
            let rhs = keyshare::combine_public(&ys, params).map_err(|e| e.to_string())?;
            ensure(lhs == rhs, || format!("identity fails for {xs:?}"))?;

            let oracle_sum = xs.iter().sum::<u64>() % TOY_Q;
            let oracle_prod = xs
                .iter()
                .fold(1, |acc, &x| acc * pow_mod(TOY_G, x, TOY_P) % TOY_P);
            ensure(element_word(&lhs, params) == pow_mod(TOY_G, oracle_sum, TOY_P), || {
                format!("exp(g, sum) differs from oracle for {xs:?}")
            })?;
            ensure(element_word(&rhs, params) == oracle_prod, || {
                format!("product of shares differs from oracle for {xs:?}")
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} share tuples, exact"))
}

// ---------------------------------------------------------------- criterion 4

fn subsets(n: u64, k: usize) -> Vec<Vec<u64>> {
    (0u32..(1 << n))
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (1..=n).filter(|i| m & (1 << (i - 1)) != 0).collect())
        .collect()
}

/// Polynomials over Z_q of degree < t with constant term `secret` that
/// pass through every given share, counted by brute force.
fn consistent_polynomials(secret: u64, t: usize, shares: &[(u64, u64)]) -> usize {
    let free = t - 1;
    (0..TOY_Q.pow(free as u32))
        .filter(|code| {
            let coeffs: Vec<u64> = std::iter::once(secret)
                .chain((0..free).map(|j| code / TOY_Q.pow(j as u32) % TOY_Q))
                .collect();
            shares.iter().all(|&(i, v)| {
                let at = coeffs
                    .iter()
                    .rev()
                    .fold(0, |acc, c| (acc * i + c) % TOY_Q);
                at == v
            })
        })
        .count()
}

fn criterion_4() -> Outcome {
    let params = GroupParams::toy();
    let mut rng = StdRng::seed_from_u64(0xC4);
    let identity: IdentityRef = "mockbook:alice".parse().map_err(|e: ringauth_core::KeyError| e.to_string())?;
    let q_id = pkg::identity_point(&identity, params).map_err(|e| e.to_string())?;
    let q_word = element_word(&q_id, params);
    let mut recombined = 0;
    let mut hidden = 0;
    for n in 1..=4usize {
        for t in 1..=n {
            for s in 0..=10u64 {
                let secret = params.scalar_from_u64(s);
                let shares: Vec<ShamirShare> =
                    pkg::shamir_share(&secret, t, n, params, &mut rng).map_err(|e| e.to_string())?;
                let responses: Vec<_> = shares
                    .iter()
                    .map(|sh| pkg::pkg_extract_share(sh, &identity, params))
                    .collect::<Result<_, _>>()
                    .map_err(|e| e.to_string())?;
                let expected = pow_mod(q_word, s, TOY_P);
                for subset in subsets(n as u64, t) {
                    let chosen: Vec<_> = responses
                        .iter()
                        .filter(|r| subset.contains(&r.index))
                        .cloned()
                        .collect();
                    let got = pkg::pkg_recombine(&chosen, t, params).map_err(|e| e.to_string())?;
                    ensure(element_word(&got, params) == expected, || {
                        format!("t={t} n={n} s={s} subset {subset:?} recombined wrongly")
                    })?;
                    recombined += 1;
                }
                for subset in subsets(n as u64, t - 1) {
                    let points: Vec<(u64, u64)> = shares
                        .iter()
                        .filter(|sh| subset.contains(&sh.index))
                        .map(|sh| (sh.index, scalar_word(&sh.value, params)))
                        .collect();
                    for candidate in 0..TOY_Q {
                        ensure(consistent_polynomials(candidate, t, &points) == 1, || {
                            format!("t={t} n={n} subset {subset:?} rules out secret {candidate}")
                        })?;
                    }
                    hidden += 1;
                }
            }
        }
    }
    Ok(format!(
        "{recombined} t-subset recombinations exact; {hidden} (t-1)-subsets consistent with all 11 secrets"
    ))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    runtime().block_on(async {
        let d = InProcess::new(GroupParams::production(), 3);
        let params = &d.params;
        let tokens = direct_tokens();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let alice: Vec<IdentityRef> = vec!["mockbook:alice".parse().expect("id")];
        let keyring = ops::collect_key(&alice, &d.apis, &tokens, params)
            .await
            .map_err(|e| e.to_string())?
            .keyring;
        let members: Vec<RingMember> = ["mockbook:alice", "mockbook:bob", "mockpal:carol"]
            .iter()
            .map(|m| m.parse().expect("member"))
            .collect();
        let ring0 = ops::build_ring(&members, &d.apis, None, params)
            .await
            .map_err(|e| e.to_string())?;
        let doc = dir.path().join("doc.txt");
        std::fs::write(&doc, b"signed in epoch 0").map_err(|e| e.to_string())?;
        let signed = ops::sign_document(&doc, &ring0, &keyring, b"", params).map_err(|e| e.to_string())?;

        let mut before = Vec::new();
        for s in &d.apis {
            for m in &members {
                for a in m.accounts() {
                    before.push(s.public_share(a, Some(0)).await.map_err(|e| e.to_string())?);
                }
            }
        }

        for s in &d.apis {
            let info = s.rotate().await.map_err(|e| e.to_string())?;
            ensure(info.epoch == 1, || format!("{} at epoch {}", info.server_id, info.epoch))?;
        }

        let mut refused = 0;
        for s in &d.servers {
            let tok = tokens
                .token(&alice[0], s.server_id())
                .await
                .map_err(|e| e.to_string())?;
            let err = s
                .get_private_share_at(&[tok], Some(0))
                .map(|_| ())
                .expect_err("old-epoch private share served");
            ensure(err.code == ErrorCode::EpochExpired, || format!("got {}", err.code))?;
            refused += 1;
        }

        let mut after = Vec::new();
        for s in &d.apis {
            for m in &members {
                for a in m.accounts() {
                    after.push(s.public_share(a, Some(0)).await.map_err(|e| e.to_string())?);
                }
            }
        }
        let identical = before
            .iter()
            .zip(&after)
            .all(|(a, b)| serde_json::to_vec(a).ok() == serde_json::to_vec(b).ok());
        ensure(identical && before.len() == after.len(), || {
            "archived public shares changed after rotation".into()
        })?;

        let archived_ring = ops::build_ring(&members, &d.apis, Some(0), params)
            .await
            .map_err(|e| e.to_string())?;
        ensure(archived_ring == ring0, || "archived ring differs from epoch-0 ring".into())?;
        let report = ops::verify_document(&doc, &signed.detached, &archived_ring, params)
            .map_err(|e| e.to_string())?;
        ensure(report.accepted, || "epoch-0 signature rejected against archived ring".into())?;

        let current = ops::build_ring(&members, &d.apis, None, params)
            .await
            .map_err(|e| e.to_string())?;
        ensure(current.members != ring0.members, || "epoch-1 keys equal epoch-0 keys".into())?;
        let _ = d.clock.now();
        Ok(format!(
            "{refused}/3 servers refused epoch-0 private shares; {} archived shares byte-identical; old signature verifies",
            before.len()
        ))
    })
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let params = GroupParams::production();
    let mut rng = StdRng::seed_from_u64(0xC6);
    let started = Instant::now();
    let sizes = [16usize, 32, 64, 128, 256, 512, 1024];
    let report = bench::run(&sizes, 5, params, &mut rng).map_err(|e| e.to_string())?;
    for p in &report.points {
        ensure(p.size_bytes == 296 + 32 * p.ring_size, || {
            format!("n={} encoded to {} bytes", p.ring_size, p.size_bytes)
        })?;
    }
    let hundred = bench::run(&[99, 100], 5, params, &mut rng).map_err(|e| e.to_string())?;
    let sign_100 = hundred.points[1].sign_secs;
    let secs = started.elapsed().as_secs_f64();
    let series = || report.to_csv().replace('\n', "; ");
    ensure(report.sign_fit.r2 >= 0.98, || {
        format!("sign R2 {:.4} over {}", report.sign_fit.r2, series())
    })?;
    ensure(report.verify_fit.r2 >= 0.98, || {
        format!("verify R2 {:.4} over {}", report.verify_fit.r2, series())
    })?;
    ensure(sign_100 < 2.0, || format!("sign at n=100 took {sign_100:.3}s"))?;
    ensure(secs <= 600.0, || format!("took {secs:.0}s, limit 600s"))?;
    Ok(format!(
        "sign R2 {:.4}, verify R2 {:.4}, size = 296 + 32n exact, sign(n=100) {:.3}s, {:.0}s total",
        report.sign_fit.r2, report.verify_fit.r2, sign_100, secs
    ))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let script = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scripts/e2e.sh");
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let started = Instant::now();
    let output = std::process::Command::new("bash")
        .arg(&script)
        .arg(work.path())
        .env("RINGAUTH", env!("CARGO_BIN_EXE_ringauth"))
        .output()
        .map_err(|e| format!("could not run {}: {e}", script.display()))?;
    let secs = started.elapsed().as_secs_f64();
    if !output.status.success() {
        return Err(format!(
            "script exited with {:?}\n{}{}",
            output.status.code(),
            String::from_utf8_lossy(&output.stdout),
            String::from_utf8_lossy(&output.stderr)
        ));
    }
    ensure(secs <= 60.0, || format!("took {secs:.1}s, limit 60s"))?;
    Ok(format!("scripts/e2e.sh exited 0 in {secs:.1}s"))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    runtime().block_on(async {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut opts = HarnessOptions::new(dir.path());
        opts.servers = 2;
        let harness = Harness::start(opts).await.map_err(|e| e.to_string())?;
        let idps = IdpDirectory::new(&harness.client.idps, 120);
        let a = HttpKeyServer::new(&harness.info.key_servers[0].url);
        let b = HttpKeyServer::new(&harness.info.key_servers[1].url);
        let alice: IdentityRef = "mockbook:alice".parse().expect("id");
        let token = idps
            .token(&alice, &harness.info.key_servers[0].id)
            .await
            .map_err(|e| e.to_string())?;
        let result = async {
            a.private_shares(vec![token.clone()])
                .await
                .map_err(|e| format!("server A refused its own token: {e}"))?;
            match b.private_shares(vec![token]).await {
                Ok(_) => Err("server B accepted a token minted for server A".to_string()),
                Err(e) if e.code() == Some(ErrorCode::AudienceMismatch) => {
                    Ok("token for A rejected by B with audience_mismatch".to_string())
                }
                Err(e) => Err(format!("wrong rejection: {e}")),
            }
        }
        .await;
        harness.stop().await.map_err(|e| e.to_string())?;
        result
    })
}

// ---------------------------------------------------------------- driver

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("LRS correctness and mutation rejection", criterion_1),
        ("pseudonym stability and Sybil count", criterion_2),
        ("anytrust key identity, exhaustive toy", criterion_3),
        ("Shamir/PKG recombination and hiding, exhaustive toy", criterion_4),
        ("epoch rotation and archive", criterion_5),
        ("scaling linearity and size law", criterion_6),
        ("end-to-end CLI script", criterion_7),
        ("token audience isolation", criterion_8),
    ];
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !filter.is_empty() && !filter.contains(&number) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let took = Duration::from_secs_f64(started.elapsed().as_secs_f64());
        match outcome {
            Ok(detail) => println!("PASS criterion {number}: {name}: {detail} [{took:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {number}: {name}: {detail} [{took:.1?}]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
