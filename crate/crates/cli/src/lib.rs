//! Client side of ringauth: collecting a composite key from the key servers,
//! building rings from their directories, signing and verifying documents,
//! logging in to the auth provider, benchmarks and a local test harness.

pub mod bench;
pub mod error;
pub mod files;
pub mod harness;
pub mod ops;

pub use error::CliError;
pub use files::{ClientConfig, KeyringFile, RingEntry, RingFile};
