//! Cryptographic core for anonymous, accountable login.
//!
//! * [`group`]: Schnorr group arithmetic and hashing.
//! * [`lrs`]: linkable ring signatures.
//! * [`keyshare`]: anytrust key shares, composite keys, epochs.
//! * [`pkg`]: Shamir-shared identity-based key generation.

pub mod group;
pub mod keyshare;
pub mod lrs;
pub mod pkg;

pub use group::{GroupElement, GroupError, GroupParams, Scalar};
pub use keyshare::{CompositeKey, EpochState, IdentityRef, KeyError, KeyShare, MasterSecret};
pub use lrs::{LinkableRingSig, LrsError, Ring, VerifyOutcome};
pub use pkg::{PkgError, PkgShareResponse, ShamirShare};
