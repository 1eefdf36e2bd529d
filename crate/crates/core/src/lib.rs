//! Membership-inference privacy auditing.
//!
//! The crate trains desk-scale fleets of (possibly defended) models with
//! balanced audit-sample memberships, scores every audit sample with
//! likelihood-ratio and defense-adaptive attacks, and reports TPR at low FPR
//! both over the whole population and per sample / per canary set.
//!
//! Module map:
//! - [`domain`]: examples, datasets, membership matrices, score tensors.
//! - [`data`]: synthetic data and canary families.
//! - [`model`] / [`defenses`]: small networks and the defended trainers.
//! - [`attacks`]: membership scores, LiRA, label-only and contrastive attacks.
//! - [`eval`]: ROC machinery, audit protocols and reports.

pub mod attacks;
pub mod data;
pub mod defenses;
pub mod domain;
pub mod error;
pub mod eval;
pub mod model;
pub mod parallel;
pub mod rng;

pub use domain::{
    assign_memberships, training_set_for, Dataset, Example, MembershipMatrix, ScoreTensor,
};
pub use error::{Error, Result};

/// Engine version embedded in every persisted artifact.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
