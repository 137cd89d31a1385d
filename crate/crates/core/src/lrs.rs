//! Linkable ring signatures (LSAG construction) over the Schnorr group.
//!
//! A signature proves that one member of a ring of public keys signed a
//! message without revealing which one, and carries a linkage tag
//! `h^x` where `h` is derived from a linkability scope. Two signatures under
//! the same scope by the same private key carry the same tag.
//!
//! An empty scope binds the tag base to the ring descriptor, so the tag then
//! changes whenever the ring does. Services that need pseudonyms stable
//! across anonymity sets pin a scope string instead.

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::group::{GroupElement, GroupError, GroupParams, Scalar};

const CHALLENGE_TAG: &[u8] = b"lrs-c";
const TAG_BASE_TAG: &[u8] = b"lrs-h";

/// Magic prefix of a detached signature file.
pub const DETACHED_MAGIC: &[u8; 8] = b"LRSSIG01";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LrsError {
    #[error("ring must contain at least one member")]
    EmptyRing,
    #[error("ring contains a duplicate member")]
    DuplicateMember,
    #[error("signer index {index} out of range for ring of {size}")]
    SignerOutOfRange { index: usize, size: usize },
    #[error("private key does not match the claimed ring slot")]
    KeyMismatch,
    #[error("signature has {sig} responses but ring has {ring} members")]
    LengthMismatch { sig: usize, ring: usize },
    #[error("signatures were made under different scopes")]
    ScopeMismatch,
    #[error("malformed signature: {0}")]
    Malformed(String),
    #[error(transparent)]
    Group(#[from] GroupError),
}

/// A canonicalized anonymity set: members sorted by encoding, no duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ring {
    members: Vec<GroupElement>,
    descriptor: Vec<u8>,
}

impl Ring {
    pub fn new(mut members: Vec<GroupElement>, params: &GroupParams) -> Result<Self, LrsError> {
        if members.is_empty() {
            return Err(LrsError::EmptyRing);
        }
        members.sort();
        if members.windows(2).any(|w| w[0] == w[1]) {
            return Err(LrsError::DuplicateMember);
        }
        let mut descriptor = Vec::with_capacity(4 + members.len() * params.element_len());
        descriptor.extend_from_slice(&(members.len() as u32).to_be_bytes());
        for m in &members {
            descriptor.extend_from_slice(&params.encode_element(m));
        }
        Ok(Ring {
            members,
            descriptor,
        })
    }

    pub fn members(&self) -> &[GroupElement] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `u32` member count followed by each member's fixed-width encoding.
    pub fn descriptor(&self) -> &[u8] {
        &self.descriptor
    }

    pub fn position(&self, key: &GroupElement) -> Option<usize> {
        self.members.binary_search(key).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkableRingSig {
    pub c1: Scalar,
    pub s: Vec<Scalar>,
    pub tag: GroupElement,
    pub scope: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub accepted: bool,
    /// The linkage tag, present only when the signature was accepted.
    pub tag: Option<GroupElement>,
}

/// Base of the linkage tag for `scope` over `ring`.
pub fn tag_base(
    ring: &Ring,
    scope: &[u8],
    params: &GroupParams,
) -> Result<GroupElement, LrsError> {
    let effective = if scope.is_empty() {
        ring.descriptor()
    } else {
        scope
    };
    Ok(params.hash_to_group(effective, TAG_BASE_TAG)?)
}

/// Linkage tag a given private key produces under `scope`.
pub fn linkage_tag(
    x: &Scalar,
    ring: &Ring,
    scope: &[u8],
    params: &GroupParams,
) -> Result<GroupElement, LrsError> {
    let h = tag_base(ring, scope, params)?;
    Ok(params.exp_secret(&h, x))
}

struct ChainContext<'a> {
    params: &'a GroupParams,
    prefix: Vec<u8>,
}

impl<'a> ChainContext<'a> {
    fn new(
        params: &'a GroupParams,
        ring: &Ring,
        scope: &[u8],
        tag: &GroupElement,
        msg: &[u8],
    ) -> Self {
        let mut prefix = Vec::with_capacity(
            ring.descriptor().len() + scope.len() + msg.len() + params.element_len() + 12,
        );
        prefix.extend_from_slice(ring.descriptor());
        prefix.extend_from_slice(&(scope.len() as u32).to_be_bytes());
        prefix.extend_from_slice(scope);
        prefix.extend_from_slice(&params.encode_element(tag));
        prefix.extend_from_slice(&(msg.len() as u64).to_be_bytes());
        prefix.extend_from_slice(msg);
        ChainContext { params, prefix }
    }

    fn challenge(&self, left: &GroupElement, right: &GroupElement) -> Scalar {
        let mut data = self.prefix.clone();
        data.extend_from_slice(&self.params.encode_element(left));
        data.extend_from_slice(&self.params.encode_element(right));
        self.params.hash_to_scalar(&data, CHALLENGE_TAG)
    }

    // g^s * Y^c and h^s * tag^c
    fn step(
        &self,
        s: &Scalar,
        c: &Scalar,
        member: &GroupElement,
        h: &GroupElement,
        tag: &GroupElement,
    ) -> Scalar {
        let p = self.params;
        let left = p.mul(&p.exp_g(s), &p.exp(member, c));
        let right = p.mul(&p.exp(h, s), &p.exp(tag, c));
        self.challenge(&left, &right)
    }
}

/// Signs `msg` as ring member `signer_index` holding private key `x`.
pub fn sign<R: RngCore + CryptoRng>(
    msg: &[u8],
    ring: &Ring,
    signer_index: usize,
    x: &Scalar,
    scope: &[u8],
    params: &GroupParams,
    rng: &mut R,
) -> Result<LinkableRingSig, LrsError> {
    let n = ring.len();
    if signer_index >= n {
        return Err(LrsError::SignerOutOfRange {
            index: signer_index,
            size: n,
        });
    }
    let g = params.generator();
    if params.exp_secret(&g, x) != ring.members()[signer_index] {
        return Err(LrsError::KeyMismatch);
    }
    let h = tag_base(ring, scope, params)?;
    let tag = params.exp_secret(&h, x);
    let ctx = ChainContext::new(params, ring, scope, &tag, msg);

    let zero = params.scalar_from_u64(0);
    let mut c = vec![zero.clone(); n];
    let mut s = vec![zero; n];

    let u = params.random_scalar(rng);
    c[(signer_index + 1) % n] = ctx.challenge(&params.exp_secret(&g, &u), &params.exp_secret(&h, &u));
    for k in 1..n {
        let i = (signer_index + k) % n;
        s[i] = params.random_scalar(rng);
        c[(i + 1) % n] = ctx.step(&s[i], &c[i], &ring.members()[i], &h, &tag);
    }
    s[signer_index] = params.scalar_sub(&u, &params.scalar_mul(x, &c[signer_index]));

    Ok(LinkableRingSig {
        c1: c.swap_remove(0),
        s,
        tag,
        scope: scope.to_vec(),
    })
}

/// Recomputes the challenge chain and accepts iff it closes at `c1`.
pub fn verify(
    msg: &[u8],
    ring: &Ring,
    sig: &LinkableRingSig,
    params: &GroupParams,
) -> Result<VerifyOutcome, LrsError> {
    if sig.s.len() != ring.len() {
        return Err(LrsError::LengthMismatch {
            sig: sig.s.len(),
            ring: ring.len(),
        });
    }
    // Fields may have been built against another parameter set.
    let tag = params.element(sig.tag.value().clone())?;
    params.scalar(sig.c1.value().clone())?;
    for s in &sig.s {
        params.scalar(s.value().clone())?;
    }

    let h = tag_base(ring, &sig.scope, params)?;
    let ctx = ChainContext::new(params, ring, &sig.scope, &tag, msg);
    let mut c = sig.c1.clone();
    for (member, s) in ring.members().iter().zip(&sig.s) {
        c = ctx.step(s, &c, member, &h, &tag);
    }
    let accepted = c == sig.c1;
    Ok(VerifyOutcome {
        accepted,
        tag: accepted.then_some(tag),
    })
}

/// True iff both signatures carry the same linkage tag.
///
/// Both signatures must already have been verified. With an empty scope the
/// tag is bound to the ring, so tags are only comparable for the same ring.
pub fn link(a: &LinkableRingSig, b: &LinkableRingSig) -> Result<bool, LrsError> {
    if a.scope != b.scope {
        return Err(LrsError::ScopeMismatch);
    }
    Ok(a.tag == b.tag)
}

/// Exact encoded length for a ring of `n` members and a scope of `scope_len` bytes.
pub fn encoded_len(n: usize, scope_len: usize, params: &GroupParams) -> usize {
    8 + scope_len + params.element_len() + params.scalar_len() * (n + 1)
}

/// `n (u32) || scope_len (u32) || scope || tag || c1 || s_1..s_n`, big-endian, fixed width.
pub fn encode(sig: &LinkableRingSig, params: &GroupParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(sig.s.len(), sig.scope.len(), params));
    out.extend_from_slice(&(sig.s.len() as u32).to_be_bytes());
    out.extend_from_slice(&(sig.scope.len() as u32).to_be_bytes());
    out.extend_from_slice(&sig.scope);
    out.extend_from_slice(&params.encode_element(&sig.tag));
    out.extend_from_slice(&params.encode_scalar(&sig.c1));
    for s in &sig.s {
        out.extend_from_slice(&params.encode_scalar(s));
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], LrsError> {
        if self.buf.len() < n {
            return Err(LrsError::Malformed(format!("truncated {what}")));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<usize, LrsError> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8], params: &GroupParams) -> Result<LinkableRingSig, LrsError> {
    let mut r = Reader { buf: bytes };
    let n = r.u32("ring count")?;
    if n == 0 {
        return Err(LrsError::Malformed("ring count is zero".into()));
    }
    let scope_len = r.u32("scope length")?;
    let remaining = r.buf.len();
    // Checked before allocating anything sized by n.
    let needed = (scope_len as u128)
        + params.element_len() as u128
        + params.scalar_len() as u128 * (n as u128 + 1);
    if remaining as u128 != needed {
        return Err(LrsError::Malformed(format!(
            "expected {needed} bytes after header, found {remaining}"
        )));
    }
    let scope = r.take(scope_len, "scope")?.to_vec();
    let tag = params.decode_element(r.take(params.element_len(), "tag")?)?;
    let c1 = params.decode_scalar(r.take(params.scalar_len(), "c1")?)?;
    let s = (0..n)
        .map(|_| Ok(params.decode_scalar(r.take(params.scalar_len(), "response")?)?))
        .collect::<Result<Vec<_>, LrsError>>()?;
    Ok(LinkableRingSig { c1, s, tag, scope })
}

/// Detached signature file contents: magic followed by the encoding.
pub fn encode_detached(sig: &LinkableRingSig, params: &GroupParams) -> Vec<u8> {
    let mut out = DETACHED_MAGIC.to_vec();
    out.extend_from_slice(&encode(sig, params));
    out
}

pub fn decode_detached(bytes: &[u8], params: &GroupParams) -> Result<LinkableRingSig, LrsError> {
    match bytes.strip_prefix(DETACHED_MAGIC.as_slice()) {
        Some(rest) => decode(rest, params),
        None => Err(LrsError::Malformed("missing LRSSIG01 magic".into())),
    }
}

/// Public key for a private scalar, computed with the secret-exponent ladder.
pub fn public_key(x: &Scalar, params: &GroupParams) -> GroupElement {
    params.exp_secret(&params.generator(), x)
}
