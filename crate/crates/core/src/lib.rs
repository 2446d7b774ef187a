//! In-process, deterministic OAuth 2.0 / OpenID Connect single sign-on
//! sandbox: a simulated browser, Relying Party, Identity Provider and web
//! attacker, plus a Referer-based CSRF guard for the RP's callback endpoint.

pub mod browser;
pub mod guard;
pub mod http;
pub mod idp;
pub mod net;
pub mod rng;
pub mod rp;
pub mod scenario;
