//! Distributed private key generator for identity-based keys.
//!
//! A master scalar `s` is Shamir-shared across key servers. For an identity
//! with hash point `Q_ID`, server `i` returns `Q_ID^{s_i}` and the client
//! recombines `Q_ID^s = prod (Q_ID^{s_i})^{lambda_i}` with Lagrange
//! coefficients evaluated at zero.

use std::collections::BTreeSet;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::{GroupElement, GroupError, GroupParams, Scalar};
use crate::keyshare::IdentityRef;

const QID_TAG: &[u8] = b"ibe-qid";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PkgError {
    #[error("threshold {t} is invalid for {n} shares")]
    BadThreshold { t: usize, n: usize },
    #[error("share count {n} must be below the subgroup order")]
    TooManyShares { n: usize },
    #[error("index {0} is not usable (zero, duplicate, or not reducible mod q)")]
    BadIndex(u64),
    #[error("index {0} is not in the index set")]
    IndexNotInSet(u64),
    #[error("need {needed} distinct shares, have {have}")]
    NotEnoughShares { needed: usize, have: usize },
    #[error("polynomial must have at least one coefficient")]
    EmptyPolynomial,
    #[error(transparent)]
    Group(#[from] GroupError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShamirShare {
    pub index: u64,
    pub value: Scalar,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkgShareResponse {
    pub index: u64,
    pub q_priv: GroupElement,
}

/// `{"index": i, "value_hex": s, "t": t, "n": n}`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareFile {
    pub index: u64,
    pub value_hex: String,
    pub t: usize,
    pub n: usize,
}

impl ShareFile {
    pub fn new(share: &ShamirShare, t: usize, n: usize, params: &GroupParams) -> Self {
        ShareFile {
            index: share.index,
            value_hex: params.scalar_to_hex(&share.value),
            t,
            n,
        }
    }

    pub fn share(&self, params: &GroupParams) -> Result<ShamirShare, PkgError> {
        Ok(ShamirShare {
            index: self.index,
            value: params.scalar_from_hex(&self.value_hex)?,
        })
    }
}

fn check_sizes(t: usize, n: usize, params: &GroupParams) -> Result<(), PkgError> {
    if t == 0 || t > n {
        return Err(PkgError::BadThreshold { t, n });
    }
    if num_bigint::BigUint::from(n) >= *params.q() {
        return Err(PkgError::TooManyShares { n });
    }
    Ok(())
}

/// Evaluates the polynomial with `coeffs[0] = secret` at `1..=n`.
pub fn share_polynomial(
    coeffs: &[Scalar],
    n: usize,
    params: &GroupParams,
) -> Result<Vec<ShamirShare>, PkgError> {
    if coeffs.is_empty() {
        return Err(PkgError::EmptyPolynomial);
    }
    check_sizes(coeffs.len(), n, params)?;
    Ok((1..=n as u64)
        .map(|index| {
            let x = params.scalar_from_u64(index);
            // Horner
            let value = coeffs
                .iter()
                .rev()
                .fold(params.scalar_from_u64(0), |acc, c| {
                    params.scalar_add(&params.scalar_mul(&acc, &x), c)
                });
            ShamirShare { index, value }
        })
        .collect())
}

/// Splits `secret` into `n` shares, any `t` of which reconstruct it.
pub fn shamir_share<R: RngCore + CryptoRng>(
    secret: &Scalar,
    t: usize,
    n: usize,
    params: &GroupParams,
    rng: &mut R,
) -> Result<Vec<ShamirShare>, PkgError> {
    check_sizes(t, n, params)?;
    let mut coeffs = Vec::with_capacity(t);
    coeffs.push(secret.clone());
    coeffs.extend((1..t).map(|_| params.random_scalar(rng)));
    share_polynomial(&coeffs, n, params)
}

/// `lambda_i = prod_{j != i} j / (j - i) mod q`.
pub fn lagrange_coeff(indices: &[u64], i: u64, params: &GroupParams) -> Result<Scalar, PkgError> {
    let mut seen = BTreeSet::new();
    for &j in indices {
        let reduced = params.scalar_from_u64(j);
        if reduced.is_zero() || !seen.insert(reduced) {
            return Err(PkgError::BadIndex(j));
        }
    }
    if !indices.contains(&i) {
        return Err(PkgError::IndexNotInSet(i));
    }
    let xi = params.scalar_from_u64(i);
    let mut num = params.scalar_from_u64(1);
    let mut den = params.scalar_from_u64(1);
    for &j in indices.iter().filter(|&&j| j != i) {
        let xj = params.scalar_from_u64(j);
        num = params.scalar_mul(&num, &xj);
        den = params.scalar_mul(&den, &params.scalar_sub(&xj, &xi));
    }
    let inv = params.scalar_inv(&den).ok_or(PkgError::BadIndex(i))?;
    Ok(params.scalar_mul(&num, &inv))
}

/// Reconstructs the shared secret from at least `t` shares.
pub fn shamir_reconstruct(
    shares: &[ShamirShare],
    t: usize,
    params: &GroupParams,
) -> Result<Scalar, PkgError> {
    let chosen = first_distinct(shares.iter().map(|s| s.index), t)?;
    let mut acc = params.scalar_from_u64(0);
    for &i in &chosen {
        let share = shares
            .iter()
            .find(|s| s.index == i)
            .expect("chosen index comes from shares");
        let lambda = lagrange_coeff(&chosen, i, params)?;
        acc = params.scalar_add(&acc, &params.scalar_mul(&lambda, &share.value));
    }
    Ok(acc)
}

fn first_distinct(indices: impl Iterator<Item = u64>, t: usize) -> Result<Vec<u64>, PkgError> {
    let mut chosen = Vec::with_capacity(t);
    let mut have = 0;
    for i in indices {
        if !chosen.contains(&i) {
            have += 1;
            if chosen.len() < t {
                chosen.push(i);
            }
        }
    }
    if chosen.len() < t || t == 0 {
        return Err(PkgError::NotEnoughShares { needed: t, have });
    }
    Ok(chosen)
}

/// `Q_ID = hash_to_group(provider:user_id, "ibe-qid")`.
pub fn identity_point(identity: &IdentityRef, params: &GroupParams) -> Result<GroupElement, PkgError> {
    Ok(params.hash_to_group(identity.canonical().as_bytes(), QID_TAG)?)
}

pub fn extract_for_point(
    share: &ShamirShare,
    q_id: &GroupElement,
    params: &GroupParams,
) -> PkgShareResponse {
    PkgShareResponse {
        index: share.index,
        q_priv: params.exp_secret(q_id, &share.value),
    }
}

/// Server side: `Q_ID^{s_i}`.
pub fn pkg_extract_share(
    share: &ShamirShare,
    identity: &IdentityRef,
    params: &GroupParams,
) -> Result<PkgShareResponse, PkgError> {
    Ok(extract_for_point(share, &identity_point(identity, params)?, params))
}

/// Client side: combines the first `t` distinct responses.
pub fn pkg_recombine(
    responses: &[PkgShareResponse],
    t: usize,
    params: &GroupParams,
) -> Result<GroupElement, PkgError> {
    let chosen = first_distinct(responses.iter().map(|r| r.index), t)?;
    let mut acc = params.identity();
    for &i in &chosen {
        let r = responses
            .iter()
            .find(|r| r.index == i)
            .expect("chosen index comes from responses");
        let element = params.element(r.q_priv.value().clone())?;
        let lambda = lagrange_coeff(&chosen, i, params)?;
        acc = params.mul(&acc, &params.exp(&element, &lambda));
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use rand::rngs::OsRng;

    fn toy() -> &'static GroupParams {
        GroupParams::toy()
    }

    fn sc(v: u64) -> Scalar {
        toy().scalar_from_u64(v)
    }

    fn el(v: u32) -> GroupElement {
        toy().element(BigUint::from(v)).unwrap()
    }

    #[test]
    fn fixed_polynomial_shares() {
        // 7 + 3x mod 11 at x = 1, 2, 3
        let expected: Vec<u64> = (1..=3).map(|x| (7 + 3 * x) % 11).collect();
        assert_eq!(expected, vec![10, 2, 5]);
        let shares = share_polynomial(&[sc(7), sc(3)], 3, toy()).unwrap();
        let got: Vec<(u64, Scalar)> = shares.into_iter().map(|s| (s.index, s.value)).collect();
        assert_eq!(got, vec![(1, sc(10)), (2, sc(2)), (3, sc(5))]);
    }

    #[test]
    fn constant_polynomial_for_threshold_one() {
        let shares = shamir_share(&sc(6), 1, 4, toy(), &mut OsRng).unwrap();
        assert!(shares.iter().all(|s| s.value == sc(6)));
        let single = shamir_share(&sc(6), 1, 1, toy(), &mut OsRng).unwrap();
        assert_eq!(single, vec![ShamirShare { index: 1, value: sc(6) }]);
    }

    #[test]
    fn bad_thresholds() {
        assert_eq!(
            shamir_share(&sc(1), 3, 2, toy(), &mut OsRng),
            Err(PkgError::BadThreshold { t: 3, n: 2 })
        );
        assert_eq!(
            shamir_share(&sc(1), 0, 2, toy(), &mut OsRng),
            Err(PkgError::BadThreshold { t: 0, n: 2 })
        );
        assert_eq!(
            shamir_share(&sc(1), 2, 11, toy(), &mut OsRng),
            Err(PkgError::TooManyShares { n: 11 })
        );
    }

    #[test]
    fn lagrange_examples() {
        assert_eq!(lagrange_coeff(&[1, 2], 1, toy()).unwrap(), sc(2));
        assert_eq!(lagrange_coeff(&[1, 2], 2, toy()).unwrap(), sc(10));
        assert_eq!(lagrange_coeff(&[3], 3, toy()).unwrap(), sc(1));
        assert_eq!(lagrange_coeff(&[1, 1], 1, toy()), Err(PkgError::BadIndex(1)));
        assert_eq!(lagrange_coeff(&[1, 12], 1, toy()), Err(PkgError::BadIndex(12)));
        assert_eq!(lagrange_coeff(&[1, 2], 3, toy()), Err(PkgError::IndexNotInSet(3)));
    }

    #[test]
    fn extract_and_recombine_examples() {
        let q_id = el(18);
        let r = extract_for_point(&ShamirShare { index: 1, value: sc(3) }, &q_id, toy());
        assert_eq!(r.q_priv, el(13));
        let zero = extract_for_point(&ShamirShare { index: 1, value: sc(0) }, &q_id, toy());
        assert_eq!(zero.q_priv, el(1));

        // 18^7 mod 23 = 6
        let shares = share_polynomial(&[sc(7), sc(3)], 3, toy()).unwrap();
        let responses: Vec<_> = shares.iter().map(|s| extract_for_point(s, &q_id, toy())).collect();
        assert_eq!(pkg_recombine(&responses[..2], 2, toy()).unwrap(), el(6));
        assert_eq!(pkg_recombine(&responses[1..], 2, toy()).unwrap(), el(6));
        let mut reversed = responses.clone();
        reversed.reverse();
        assert_eq!(pkg_recombine(&reversed, 2, toy()).unwrap(), el(6));
        assert_eq!(
            pkg_recombine(&responses[..1], 2, toy()),
            Err(PkgError::NotEnoughShares { needed: 2, have: 1 })
        );
        let dup = vec![responses[0].clone(), responses[0].clone()];
        assert_eq!(
            pkg_recombine(&dup, 2, toy()),
            Err(PkgError::NotEnoughShares { needed: 2, have: 1 })
        );
    }

    #[test]
    fn identity_point_shared_across_servers() {
        let id = IdentityRef::new("mockbook", "alice").unwrap();
        let q_id = identity_point(&id, toy()).unwrap();
        let shares = share_polynomial(&[sc(4), sc(9)], 2, toy()).unwrap();
        for s in &shares {
            let r = pkg_extract_share(s, &id, toy()).unwrap();
            assert_eq!(r.q_priv, toy().exp(&q_id, &s.value));
        }
    }

    #[test]
    fn share_file_roundtrip() {
        let share = ShamirShare { index: 2, value: sc(9) };
        let file = ShareFile::new(&share, 2, 3, toy());
        let json = serde_json::to_string(&file).unwrap();
        assert_eq!(json, r#"{"index":2,"value_hex":"09","t":2,"n":3}"#);
        let back: ShareFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.share(toy()).unwrap(), share);
    }

    #[test]
    fn reconstruct_scalar_secret() {
        let params = GroupParams::production();
        let secret = params.random_scalar(&mut OsRng);
        let shares = shamir_share(&secret, 3, 5, params, &mut OsRng).unwrap();
        assert_eq!(shamir_reconstruct(&shares[2..], 3, params).unwrap(), secret);
        assert_eq!(shamir_reconstruct(&shares[..3], 3, params).unwrap(), secret);
    }
}
