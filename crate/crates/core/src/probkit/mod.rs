//! Distances between categorical distributions and the special functions
//! used throughout the crate.

mod dist;
mod special;

pub use dist::{distance, kl, tv, Dist, DistanceKind, NORMALIZATION_TOL};
pub use special::{
    erf, erfc, gauss_cdf, gauss_pdf, gauss_sf, gauss_sf_ln, gordon_bounds, ln_gamma, log_binom,
    zeta_partial,
};
