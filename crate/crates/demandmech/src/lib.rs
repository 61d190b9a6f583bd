//! Demand management for energy communities with peak pricing.
//!
//! The crate models a community of users buying energy under per-slot unit
//! prices plus a peak charge, and provides:
//!
//! - [`model`]: problem instances, utilities, cost and welfare evaluators;
//! - [`oracle`]: a welfare-maximizing solver with a KKT certificate, used as
//!   ground truth throughout;
//! - [`mech_central`]: the price-based mechanism whose Nash equilibria carry
//!   the optimal allocation, with numerical equilibrium verification and
//!   budget/rationality audits;
//! - [`mech_dist`]: the same mechanism restricted to a tree message network,
//!   where proxies and summary messages stand in for non-neighbors;
//! - [`learning`]: the projected-gradient price dynamic that converges to the
//!   equilibrium of the centralized mechanism;
//! - [`scenario`]: JSON scenario and profile file formats.

pub mod error;
pub mod fixtures;
pub mod learning;
pub mod mech_central;
pub mod mech_dist;
pub mod model;
pub mod oracle;
pub mod projection;
pub mod scenario;

pub use error::{Error, Result};
