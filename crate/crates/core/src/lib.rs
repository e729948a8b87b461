//! Routing-based fingerprints for attributing experts in merged
//! mixture-of-experts models.
//!
//! The crate builds a desk-scale victim MoE from task-specific experts,
//! applies structural and parametric tampering to produce suspects, and
//! attributes each suspect expert to its victim counterpart from routing
//! statistics captured on fixed probe sets. Weight-based (PCS, ICS) and
//! activation-based (CKA) baselines are provided for comparison.

pub mod baselines;
pub mod bundle;
pub mod error;
pub mod fingerprint;
pub mod harness;
pub mod merging;
pub mod numerics;
pub mod synthdata;
pub mod tampering;
pub mod toymodel;

pub use error::{Error, Result};
