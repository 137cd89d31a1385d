#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::rngs::OsRng;
use ringauth_core::{keyshare, lrs, GroupParams, IdentityRef, Ring, Scalar};
use ringauth_service::idp::issue_token;
use ringauth_service::wire::{LoginRequest, RingMember};
use ringauth_service::{
    AuthConfig, AuthProvider, Clock, KeyServer, KeyServerApi, KeyServerConfig, ManualClock,
    ProviderSecrets,
};

pub const NOW: u64 = 1_700_000_000;

pub fn provider_map() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("mockbook".to_string(), hex::encode([7u8; 32])),
        ("mockpal".to_string(), hex::encode([9u8; 32])),
    ])
}

pub fn secrets() -> ProviderSecrets {
    ProviderSecrets::from_hex_map(&provider_map()).unwrap()
}

pub fn id(s: &str) -> IdentityRef {
    s.parse().unwrap()
}

pub fn member(s: &str) -> RingMember {
    s.parse().unwrap()
}

pub struct Deployment {
    pub params: GroupParams,
    pub clock: Arc<ManualClock>,
    pub servers: Vec<Arc<KeyServer>>,
    pub auth: Arc<AuthProvider>,
}

impl Deployment {
    pub fn new(params: &GroupParams, n: usize) -> Self {
        Self::with_config(params, n, |_| {})
    }

    pub fn with_config(params: &GroupParams, n: usize, tweak: impl FnOnce(&mut AuthConfig)) -> Self {
        let clock = Arc::new(ManualClock::new(NOW));
        let servers: Vec<Arc<KeyServer>> = (1..=n)
            .map(|i| {
                let cfg = KeyServerConfig::new(format!("ks{i}"), provider_map());
                Arc::new(KeyServer::open(cfg, params.clone(), clock.clone()).unwrap())
            })
            .collect();
        let apis: Vec<Arc<dyn KeyServerApi>> = servers
            .iter()
            .map(|s| Arc::new(s.clone()) as Arc<dyn KeyServerApi>)
            .collect();
        let mut cfg = AuthConfig::new("wiki", vec![]);
        tweak(&mut cfg);
        let auth = Arc::new(
            AuthProvider::open(cfg, params.clone(), apis, clock.clone() as Arc<dyn Clock>).unwrap(),
        );
        Deployment {
            params: params.clone(),
            clock,
            servers,
            auth,
        }
    }

    /// The composite private key for `m`, collected from every server.
    pub fn private_key(&self, m: &RingMember) -> Scalar {
        let mut xs = Vec::new();
        for ks in &self.servers {
            let tokens: Vec<_> = m
                .accounts()
                .iter()
                .map(|a| {
                    issue_token(&secrets(), &a.provider, &a.user_id, &a.user_id, ks.server_id(), 60, self.clock.now())
                        .unwrap()
                })
                .collect();
            for share in ks.get_private_share(&tokens).unwrap().shares {
                xs.push(self.params.scalar_from_hex(&share.x_hex).unwrap());
            }
        }
        keyshare::combine_private(&xs, &self.params).unwrap()
    }

    /// Signs a fresh challenge as `me` over `members`.
    pub async fn login_request(
        &self,
        me: &RingMember,
        members: &[RingMember],
        scope: &[u8],
    ) -> LoginRequest {
        let ch = self.auth.create_challenge();
        let nonce = hex::decode(&ch.nonce).unwrap();
        let keys = self.auth.member_keys(members).await.unwrap();
        let x = self.private_key(me);
        let y = lrs::public_key(&x, &self.params);
        let ring = Ring::new(keys, &self.params).unwrap();
        let idx = ring.position(&y).expect("signer in ring");
        let sig = lrs::sign(&nonce, &ring, idx, &x, scope, &self.params, &mut OsRng).unwrap();
        LoginRequest {
            challenge_id: ch.challenge_id,
            identities: members.to_vec(),
            sig_hex: hex::encode(lrs::encode(&sig, &self.params)),
            ring: None,
        }
    }

    pub async fn login_as(&self, me: &RingMember, members: &[RingMember]) -> LoginRequest {
        let scope = self.auth.scope().to_vec();
        self.login_request(me, members, &scope).await
    }
}
