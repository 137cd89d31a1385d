//! Prime-order subgroup arithmetic modulo a prime, with the hash functions the
//! signature and key-issuance layers are built on.
//!
//! All keys live in the order-`q` subgroup of `Z_p^*`. Exponents are scalars
//! modulo `q`. Every value has a canonical fixed-width big-endian encoding:
//! group elements take `ceil(bits(p)/8)` bytes and scalars take
//! `ceil(bits(q)/8)` bytes.

use std::fmt;
use std::sync::OnceLock;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Miller-Rabin rounds used when validating parameters.
pub const PRIMALITY_ROUNDS: usize = 64;

const PRODUCTION_JSON: &str = include_str!("../params/production.json");
const TOY_JSON: &str = include_str!("../params/toy.json");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupError {
    #[error("modulus p is not prime")]
    ModulusNotPrime,
    #[error("subgroup order q is not prime")]
    OrderNotPrime,
    #[error("q does not divide p - 1")]
    OrderDoesNotDivide,
    #[error("g does not generate the order-q subgroup")]
    BadGenerator,
    #[error("value is not a member of the order-q subgroup")]
    NotInSubgroup,
    #[error("scalar is not below the subgroup order")]
    ScalarOutOfRange,
    #[error("expected {expected} bytes, got {actual}")]
    BadLength { expected: usize, actual: usize },
    #[error("invalid hex: {0}")]
    Hex(String),
    #[error("invalid parameter file: {0}")]
    ParamsFile(String),
    #[error("hash-to-group exhausted its counter; parameters are broken")]
    HashToGroupExhausted,
    #[error("bit sizes rejected: need p_bits >= q_bits + 8 and q_bits >= 2")]
    BadBitSizes,
    #[error("parameter search failed; try another seed")]
    SearchFailed,
}

/// An exponent in `[0, q)`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Scalar(BigUint);

impl Scalar {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }
}

impl fmt::Debug for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Scalar({:x})", self.0)
    }
}

/// A member of the order-`q` subgroup of `Z_p^*`.
///
/// Ordering matches the ordering of the fixed-width big-endian encodings.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(BigUint);

impl GroupElement {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.is_one()
    }
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement({:x})", self.0)
    }
}

/// `{"p": hex, "q": hex, "g": hex}` with lowercase minimal hex.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub p: String,
    pub q: String,
    pub g: String,
}

/// Schnorr group parameters `(p, q, g)`.
#[derive(Clone, PartialEq, Eq)]
pub struct GroupParams {
    p: BigUint,
    q: BigUint,
    g: BigUint,
    cofactor: BigUint,
    element_len: usize,
    scalar_len: usize,
}

impl fmt::Debug for GroupParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupParams")
            .field("p_bits", &self.p.bits())
            .field("q_bits", &self.q.bits())
            .field("g", &format_args!("{:x}", self.g))
            .finish()
    }
}

impl GroupParams {
    /// Validates and builds a parameter set.
    pub fn new(p: BigUint, q: BigUint, g: BigUint) -> Result<Self, GroupError> {
        if !is_probable_prime(&q, PRIMALITY_ROUNDS) {
            return Err(GroupError::OrderNotPrime);
        }
        if !is_probable_prime(&p, PRIMALITY_ROUNDS) {
            return Err(GroupError::ModulusNotPrime);
        }
        let p_minus_1 = &p - 1u32;
        if !(&p_minus_1 % &q).is_zero() {
            return Err(GroupError::OrderDoesNotDivide);
        }
        if g <= BigUint::one() || g >= p || !g.modpow(&q, &p).is_one() {
            return Err(GroupError::BadGenerator);
        }
        Ok(Self::assemble(p, q, g))
    }

    fn assemble(p: BigUint, q: BigUint, g: BigUint) -> Self {
        let cofactor = (&p - 1u32) / &q;
        let element_len = byte_len(&p);
        let scalar_len = byte_len(&q);
        GroupParams {
            p,
            q,
            g,
            cofactor,
            element_len,
            scalar_len,
        }
    }

    /// The pinned 2048-bit / 256-bit production group.
    pub fn production() -> &'static GroupParams {
        static PRODUCTION: OnceLock<GroupParams> = OnceLock::new();
        PRODUCTION.get_or_init(|| {
            GroupParams::from_json(PRODUCTION_JSON).expect("pinned production parameters are valid")
        })
    }

    /// The toy group `p = 23, q = 11, g = 4`. Only suitable for exhaustive tests.
    pub fn toy() -> &'static GroupParams {
        static TOY: OnceLock<GroupParams> = OnceLock::new();
        TOY.get_or_init(|| GroupParams::from_json(TOY_JSON).expect("toy parameters are valid"))
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn generator(&self) -> GroupElement {
        GroupElement(self.g.clone())
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement(BigUint::one())
    }

    /// Encoded width of a group element in bytes.
    pub fn element_len(&self) -> usize {
        self.element_len
    }

    /// Encoded width of a scalar in bytes.
    pub fn scalar_len(&self) -> usize {
        self.scalar_len
    }

    pub fn to_file(&self) -> ParamsFile {
        ParamsFile {
            p: format!("{:x}", self.p),
            q: format!("{:x}", self.q),
            g: format!("{:x}", self.g),
        }
    }

    /// Canonical JSON: keys in `p, q, g` order, no whitespace.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("params serialize")
    }

    pub fn from_file(file: &ParamsFile) -> Result<Self, GroupError> {
        let parse = |s: &str| {
            BigUint::parse_bytes(s.trim_start_matches("0x").as_bytes(), 16)
                .ok_or_else(|| GroupError::Hex(s.to_string()))
        };
        let (p, q, g) = (parse(&file.p)?, parse(&file.q)?, parse(&file.g)?);
        // Skip the expensive primality tests for the pinned set.
        if let Some(pinned) = PINNED_CACHE.get() {
            if pinned.p == p && pinned.q == q && pinned.g == g {
                return Ok(pinned.clone());
            }
        }
        let params = GroupParams::new(p, q, g)?;
        if params.p.bits() >= 2048 {
            let _ = PINNED_CACHE.set(params.clone());
        }
        Ok(params)
    }

    pub fn from_json(json: &str) -> Result<Self, GroupError> {
        let file: ParamsFile =
            serde_json::from_str(json).map_err(|e| GroupError::ParamsFile(e.to_string()))?;
        GroupParams::from_file(&file)
    }

    /// Reads and validates a parameter file from disk.
    pub fn load(path: &std::path::Path) -> Result<Self, GroupError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| GroupError::ParamsFile(format!("{}: {e}", path.display())))?;
        GroupParams::from_json(&json)
    }

    /// SHA-256 of the canonical params JSON, lowercase hex.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Checks `value^q = 1 (mod p)` and `value` in `[1, p-1]`.
    pub fn element(&self, value: BigUint) -> Result<GroupElement, GroupError> {
        if value.is_zero() || value >= self.p || !value.modpow(&self.q, &self.p).is_one() {
            return Err(GroupError::NotInSubgroup);
        }
        Ok(GroupElement(value))
    }

    pub fn scalar(&self, value: BigUint) -> Result<Scalar, GroupError> {
        if value >= self.q {
            return Err(GroupError::ScalarOutOfRange);
        }
        Ok(Scalar(value))
    }

    /// Reduces an arbitrary integer modulo `q`.
    pub fn scalar_reduce(&self, value: &BigUint) -> Scalar {
        Scalar(value % &self.q)
    }

    pub fn scalar_from_u64(&self, value: u64) -> Scalar {
        self.scalar_reduce(&BigUint::from(value))
    }

    pub fn random_scalar<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Scalar {
        Scalar(rng.gen_biguint_below(&self.q))
    }

    pub fn random_nonzero_scalar<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Scalar {
        loop {
            let s = self.random_scalar(rng);
            if !s.is_zero() {
                return s;
            }
        }
    }

    /// `base^e mod p` for public exponents.
    pub fn exp(&self, base: &GroupElement, e: &Scalar) -> GroupElement {
        GroupElement(base.0.modpow(&e.0, &self.p))
    }

    /// `g^e mod p` for public exponents.
    pub fn exp_g(&self, e: &Scalar) -> GroupElement {
        GroupElement(self.g.modpow(&e.0, &self.p))
    }

    /// `base^e mod p` for secret exponents.
    ///
    /// Montgomery ladder over every bit position of `q`, so the sequence of
    /// multiplications does not depend on the exponent. The underlying
    /// bignum arithmetic is not constant time; this is best effort only.
    pub fn exp_secret(&self, base: &GroupElement, e: &Scalar) -> GroupElement {
        let mut r0 = BigUint::one();
        let mut r1 = base.0.clone();
        for bit in (0..self.q.bits()).rev() {
            let set = e.0.bit(bit);
            if set {
                std::mem::swap(&mut r0, &mut r1);
            }
            r1 = (&r0 * &r1) % &self.p;
            r0 = (&r0 * &r0) % &self.p;
            if set {
                std::mem::swap(&mut r0, &mut r1);
            }
        }
        GroupElement(r0)
    }

    pub fn mul(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        GroupElement((&a.0 * &b.0) % &self.p)
    }

    pub fn scalar_add(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 + &b.0) % &self.q)
    }

    pub fn scalar_sub(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 + &self.q - &b.0) % &self.q)
    }

    pub fn scalar_mul(&self, a: &Scalar, b: &Scalar) -> Scalar {
        Scalar((&a.0 * &b.0) % &self.q)
    }

    /// Multiplicative inverse modulo the prime `q`; `None` for zero.
    pub fn scalar_inv(&self, a: &Scalar) -> Option<Scalar> {
        if a.is_zero() {
            return None;
        }
        Some(Scalar(a.0.modpow(&(&self.q - 2u32), &self.q)))
    }

    pub fn encode_element(&self, e: &GroupElement) -> Vec<u8> {
        fixed_width(&e.0, self.element_len)
    }

    pub fn encode_scalar(&self, s: &Scalar) -> Vec<u8> {
        fixed_width(&s.0, self.scalar_len)
    }

    pub fn decode_element(&self, bytes: &[u8]) -> Result<GroupElement, GroupError> {
        if bytes.len() != self.element_len {
            return Err(GroupError::BadLength {
                expected: self.element_len,
                actual: bytes.len(),
            });
        }
        self.element(BigUint::from_bytes_be(bytes))
    }

    pub fn decode_scalar(&self, bytes: &[u8]) -> Result<Scalar, GroupError> {
        if bytes.len() != self.scalar_len {
            return Err(GroupError::BadLength {
                expected: self.scalar_len,
                actual: bytes.len(),
            });
        }
        self.scalar(BigUint::from_bytes_be(bytes))
    }

    pub fn element_to_hex(&self, e: &GroupElement) -> String {
        hex::encode(self.encode_element(e))
    }

    pub fn scalar_to_hex(&self, s: &Scalar) -> String {
        hex::encode(self.encode_scalar(s))
    }

    pub fn element_from_hex(&self, s: &str) -> Result<GroupElement, GroupError> {
        let bytes = hex::decode(s).map_err(|e| GroupError::Hex(e.to_string()))?;
        self.decode_element(&bytes)
    }

    pub fn scalar_from_hex(&self, s: &str) -> Result<Scalar, GroupError> {
        let bytes = hex::decode(s).map_err(|e| GroupError::Hex(e.to_string()))?;
        self.decode_scalar(&bytes)
    }

    /// `SHA-256(domain_tag || 0x00 || data)` as a big-endian integer, reduced mod `q`.
    pub fn hash_to_scalar(&self, data: &[u8], domain_tag: &[u8]) -> Scalar {
        let digest = Sha256::new()
            .chain_update(domain_tag)
            .chain_update([0u8])
            .chain_update(data)
            .finalize();
        self.scalar_reduce(&BigUint::from_bytes_be(&digest))
    }

    /// Maps bytes into the subgroup by cofactor exponentiation of a hash.
    ///
    /// The discrete log of the output relative to `g` is never known, which
    /// linkage tags rely on.
    pub fn hash_to_group(
        &self,
        data: &[u8],
        domain_tag: &[u8],
    ) -> Result<GroupElement, GroupError> {
        for ctr in 0..=u8::MAX {
            let digest = Sha256::new()
                .chain_update(domain_tag)
                .chain_update([0u8])
                .chain_update(data)
                .chain_update([ctr])
                .finalize();
            let u = BigUint::from_bytes_be(&digest) % &self.p;
            let h = u.modpow(&self.cofactor, &self.p);
            if !h.is_one() && !h.is_zero() {
                return Ok(GroupElement(h));
            }
        }
        Err(GroupError::HashToGroupExhausted)
    }
}

static PINNED_CACHE: OnceLock<GroupParams> = OnceLock::new();

fn byte_len(n: &BigUint) -> usize {
    (n.bits() as usize).div_ceil(8)
}

fn fixed_width(n: &BigUint, width: usize) -> Vec<u8> {
    let raw = n.to_bytes_be();
    debug_assert!(raw.len() <= width);
    let mut out = vec![0u8; width - raw.len()];
    out.extend_from_slice(&raw);
    out
}

const SMALL_PRIME_LIMIT: u32 = 2000;

fn small_primes() -> &'static [u32] {
    static PRIMES: OnceLock<Vec<u32>> = OnceLock::new();
    PRIMES.get_or_init(|| {
        let n = SMALL_PRIME_LIMIT as usize;
        let mut sieve = vec![true; n];
        sieve[0] = false;
        sieve[1] = false;
        for i in 2..n {
            if sieve[i] {
                let mut j = i * i;
                while j < n {
                    sieve[j] = false;
                    j += i;
                }
            }
        }
        (2..n as u32).filter(|&i| sieve[i as usize]).collect()
    })
}

/// Trial division followed by `rounds` Miller-Rabin rounds.
///
/// Witnesses are drawn from a stream seeded by the candidate itself, so the
/// verdict is reproducible.
pub fn is_probable_prime(n: &BigUint, rounds: usize) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &sp in small_primes() {
        let sp = BigUint::from(sp);
        if *n == sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let trailing = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> trailing;
    let seed: [u8; 32] = Sha256::new()
        .chain_update(b"miller-rabin")
        .chain_update(n.to_bytes_be())
        .finalize()
        .into();
    let mut rng = ChaCha20Rng::from_seed(seed);
    let upper = n - 2u32;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &upper);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..trailing {
            x = (&x * &x) % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Deterministically searches for `(p, q, g)` with `q` of `q_bits` bits and
/// `p = k*q + 1` of `p_bits` bits.
pub fn generate_params(q_bits: u64, p_bits: u64, seed: &[u8]) -> Result<GroupParams, GroupError> {
    if q_bits < 2 || p_bits < q_bits + 8 {
        return Err(GroupError::BadBitSizes);
    }
    let key: [u8; 32] = Sha256::new()
        .chain_update(b"ringauth-params")
        .chain_update([0u8])
        .chain_update(seed)
        .finalize()
        .into();
    let mut rng = ChaCha20Rng::from_seed(key);

    let q = search(&mut rng, 200 * q_bits, |rng| {
        let mut c = rng.gen_biguint(q_bits);
        c.set_bit(q_bits - 1, true);
        c.set_bit(0, true);
        is_probable_prime(&c, PRIMALITY_ROUNDS).then_some(c)
    })?;

    // k ranges so that k*q + 1 has exactly p_bits bits.
    let k_low = (BigUint::one() << (p_bits - 1)).div_ceil(&q);
    let k_high = ((BigUint::one() << p_bits) - 2u32) / &q;
    if k_low >= k_high {
        return Err(GroupError::SearchFailed);
    }
    let p = search(&mut rng, 200 * p_bits, |rng| {
        let mut k = rng.gen_biguint_range(&k_low, &k_high);
        k.set_bit(0, false);
        if k < k_low {
            return None;
        }
        let p = &k * &q + 1u32;
        (p.bits() == p_bits && is_probable_prime(&p, PRIMALITY_ROUNDS)).then_some(p)
    })?;

    let cofactor = (&p - 1u32) / &q;
    let mut h = BigUint::from(2u32);
    let g = loop {
        let g = h.modpow(&cofactor, &p);
        if !g.is_one() {
            break g;
        }
        h += 1u32;
    };
    GroupParams::new(p, q, g)
}

fn search<R: Rng>(
    rng: &mut R,
    attempts: u64,
    mut step: impl FnMut(&mut R) -> Option<BigUint>,
) -> Result<BigUint, GroupError> {
    for _ in 0..attempts {
        if let Some(found) = step(rng) {
            return Ok(found);
        }
    }
    Err(GroupError::SearchFailed)
}
