//! HTTP services: key servers, mock identity providers and the anonymous
//! login provider, plus clients for each.

pub mod authprovider;
pub mod client;
pub mod clock;
pub mod error;
pub mod idp;
pub mod keyserver;
pub mod serve;
pub mod wire;

pub use authprovider::{AuthConfig, AuthProvider};
pub use client::{HttpAuth, HttpIdp, HttpKeyServer, KeyServerApi};
pub use clock::{Clock, ManualClock, SystemClock};
pub use error::{ClientError, ErrorCode, ServiceError};
pub use idp::{IdpConfig, IdpToken, MockIdp, ProviderSecrets};
pub use keyserver::{KeyServer, KeyServerConfig};
pub use serve::RunningServer;
