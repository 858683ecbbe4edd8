//! Geometry of alignment and jailbreaking on toy tabular language models.
//!
//! The crate has six layers, bottom up:
//!
//! * [`probkit`] — distances between categorical distributions and the
//!   special functions everything else leans on (Gaussian cdf, Gordon tail
//!   bounds, partial zeta sums, log-binomials).
//! * [`simplex`] — harmful/safety zones on the output probability simplex:
//!   exact and Gaussian-approximate relative volumes, ℓ1 ε-expansion,
//!   uniform sampling and a Monte Carlo volume oracle.
//! * [`pacbound`] — PAC-Bayes machinery for pretraining: the ϱ complexity
//!   term, anisotropic-Gaussian KL, zeta-based average-token-length
//!   estimates, TV risks and the harmful-mixture bound, plus an empirical
//!   bound-verification harness.
//! * [`toyworld`] — finite concept/query/explanation worlds with
//!   concept-determined supports, harmfulness labels, a prompt distribution,
//!   corpus sampling and tabular-LM pretraining.
//! * [`adversary`] — the ε-bounded adversary: query-pool search, the γ_s
//!   density-ratio maximizer for Dirichlet posteriors, and the jailbreak
//!   lower-bound experiment harness.
//! * [`erlhf`] — RLHF/E-RLHF objectives, DPO/E-DPO losses with analytic
//!   gradients, closed-form optimal policies, the support proposition check
//!   and context distillation.
//!
//! All sampling is driven by explicit 64-bit seeds with counter-based
//! substreams, so every experiment is reproducible and thread-count
//! independent.

// NaN-rejecting validations use negated comparisons on purpose; frozen
// oracle constants keep their full printed precision.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::excessive_precision)]
#![allow(clippy::needless_range_loop)]

pub mod adversary;
pub mod erlhf;
mod error;
pub mod jsonfmt;
pub(crate) mod kahan;
pub mod pacbound;
pub mod probkit;
pub mod simplex;
pub mod toyworld;

pub use error::{Error, Result};
pub use probkit::{Dist, DistanceKind};
pub use simplex::{McEstimate, ZoneSpec};
pub use toyworld::{TabularLM, ToyWorld};
