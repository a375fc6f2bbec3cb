//! Linear contextual bandits with biased offline data.
//!
//! The library implements a two-branch optimistic policy over a SupLinUCB
//! elimination shell: a purely online confidence branch and an
//! offline-informed pooled branch whose extra width is routed per direction
//! through a directional bias certificate `(M_bias, rho)`. It also ships the
//! epoch-wise data-driven certificate variant, baselines, synthetic
//! environments, theory-side diagnostics (log-det potentials, waterfilling,
//! alignment constants), and a configuration-driven experiment harness.

pub mod diagnostics;
pub mod env;
pub mod error;
pub mod harness;
pub mod offline;
pub mod policy;
pub mod sim;
pub mod spd;

pub use error::{Error, Result};
