//! Special functions: error function, standard Gaussian cdf/pdf, Gordon tail
//! bounds, partial Riemann zeta sums and log-binomial coefficients.
//!
//! Everything here is hand-rolled against pinned accuracy contracts
//! (absolute error ≤ 1e-12 for the Gaussian cdf, ≤ 1e-12 for zeta partial
//! sums, 1e-10 relative for log-binomials up to n = 10^6) and verified in
//! the test suite against independent series, big-integer and
//! high-precision oracles.

use crate::error::{Error, Result};
use crate::kahan::KahanSum;

use std::f64::consts::FRAC_2_SQRT_PI;

const SQRT_2PI: f64 = 2.5066282746310005;
const SQRT_PI: f64 = 1.772_453_850_905_516;

/// Error function.
///
/// Positive-term confluent series for |x| ≤ 4 (no cancellation), Lentz
/// continued fraction on the complement beyond. Accurate to ~1e-15 absolute.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x <= 4.0 {
        erf_series(x)
    } else {
        1.0 - erfc_cf(x)
    }
}

/// Complementary error function, accurate for large arguments.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x <= 4.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

/// erf via erf(x) = (2/√π) x e^{-x²} Σ_k (2x²)^k / (2k+1)!!  — all terms
/// positive, so the sum carries full f64 precision on [0, 4].
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 0u32;
    while term > 1e-18 * sum && k < 300 {
        k += 1;
        term *= 2.0 * x2 / (2.0 * k as f64 + 1.0);
        sum += term;
    }
    FRAC_2_SQRT_PI * x * (-x2).exp() * sum
}

/// erfc via the classical continued fraction
/// √π e^{x²} erfc(x) = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))),
/// evaluated with the modified Lentz algorithm. Requires x > 0; rapid for
/// x ≥ 4.
fn erfc_cf(x: f64) -> f64 {
    (-x * x).exp() * erfcx_cf(x)
}

/// Scaled complement e^{x²} erfc(x) for x > 0 (continued fraction part).
fn erfcx_cf(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = f;
    let mut d = 0.0;
    let mut j = 0u32;
    loop {
        j += 1;
        let a = j as f64 / 2.0;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 || j > 300 {
            break;
        }
    }
    1.0 / (SQRT_PI * f)
}

/// Standard normal cumulative distribution function.
///
/// Absolute error ≤ 1e-12 on all finite inputs (verified against a
/// high-precision series oracle in the tests).
pub fn gauss_cdf(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    if x < 0.0 {
        0.5 * erfc(-z)
    } else {
        1.0 - 0.5 * erfc(z)
    }
}

/// Standard normal density.
pub fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Upper tail 1 − Φ(x), computed without cancellation.
pub fn gauss_sf(x: f64) -> f64 {
    gauss_cdf(-x)
}

/// ln(1 − Φ(x)), stable far into the tail (no underflow until x ≈ 1e154).
pub fn gauss_sf_ln(x: f64) -> f64 {
    if x <= 4.0 * std::f64::consts::SQRT_2 {
        gauss_sf(x).ln()
    } else {
        let z = x / std::f64::consts::SQRT_2;
        -z * z + (0.5 * erfcx_cf(z)).ln()
    }
}

/// Gordon's sandwich for the Gaussian upper tail: for x > 0,
/// x/(x²+1)·φ(x) ≤ 1 − Φ(x) ≤ φ(x)/x.
///
/// Returns `(lower, upper)`.
pub fn gordon_bounds(x: f64) -> Result<(f64, f64)> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!(
            "gordon_bounds requires x > 0, got {x}"
        )));
    }
    let pdf = gauss_pdf(x);
    Ok((x / (x * x + 1.0) * pdf, pdf / x))
}

/// Tail of the Riemann zeta series: Σ_{i ≥ k0} i^{-s}, for s > 1, k0 ≥ 1.
///
/// Direct Kahan summation up to an adaptively chosen pivot N, then
/// Euler–Maclaurin through the B₆ term. The pivot doubles until the first
/// omitted correction is ≤ 1e-14, keeping the absolute error well under
/// the 1e-12 contract.
pub fn zeta_partial(s: f64, k0: u64) -> Result<f64> {
    if !(s > 1.0) {
        return Err(Error::Divergence(format!(
            "zeta_partial requires s > 1, got {s}"
        )));
    }
    if k0 < 1 {
        return Err(Error::Domain("zeta_partial requires k0 >= 1".into()));
    }
    let mut pivot = k0.max(16);
    while em_remainder_bound(s, pivot) > 1e-14 && pivot < (1 << 32) {
        pivot *= 2;
    }
    let mut sum = KahanSum::new();
    for i in k0..pivot {
        sum.add((i as f64).powf(-s));
    }
    let n = pivot as f64;
    // Σ_{i≥N} i^{-s} = N^{1-s}/(s-1) + N^{-s}/2 + s N^{-s-1}/12
    //                 - s(s+1)(s+2) N^{-s-3}/720
    //                 + s(s+1)(s+2)(s+3)(s+4) N^{-s-5}/30240 + O(N^{-s-7})
    sum.add(n.powf(1.0 - s) / (s - 1.0));
    sum.add(0.5 * n.powf(-s));
    sum.add(s * n.powf(-s - 1.0) / 12.0);
    sum.add(-s * (s + 1.0) * (s + 2.0) * n.powf(-s - 3.0) / 720.0);
    sum.add(s * (s + 1.0) * (s + 2.0) * (s + 3.0) * (s + 4.0) * n.powf(-s - 5.0) / 30240.0);
    Ok(sum.value())
}

/// First omitted Euler–Maclaurin term (B₈): bounds the truncation error.
fn em_remainder_bound(s: f64, pivot: u64) -> f64 {
    let mut prod = 1.0;
    for j in 0..7 {
        prod *= s + j as f64;
    }
    prod / 1_209_600.0 * (pivot as f64).powf(-s - 7.0)
}

/// Natural log of the gamma function for positive arguments
/// (Lanczos, g = 671/128, ~1e-15 relative).
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0, "ln_gamma requires a positive argument");
    const COF: [f64; 14] = [
        57.156_235_665_862_923_5,
        -59.597_960_355_475_491_2,
        14.136_097_974_741_747_1,
        -0.491_913_816_097_620_199,
        3.399_464_998_481_188_87e-5,
        4.652_362_892_704_857_56e-5,
        -9.837_447_530_487_956_46e-5,
        1.580_887_032_249_124_94e-4,
        -2.102_644_417_241_048_83e-4,
        2.174_396_181_152_126_43e-4,
        -1.643_181_065_367_638_9e-4,
        8.441_822_398_385_274_33e-5,
        -2.619_083_840_158_140_87e-5,
        3.689_918_265_953_162_34e-6,
    ];
    let mut y = x;
    let tmp = x + 5.242_187_5;
    let tmp = (x + 0.5) * tmp.ln() - tmp;
    let mut ser = 0.999_999_999_999_997_092;
    for c in COF {
        y += 1.0;
        ser += c / y;
    }
    tmp + (SQRT_2PI * ser / x).ln()
}

/// ln C(n, k) via log-gamma; exact cases k ∈ {0, n} return 0 bitwise.
pub fn log_binom(n: u64, k: u64) -> Result<f64> {
    if k > n {
        return Err(Error::Domain(format!(
            "log_binom requires 0 <= k <= n, got n={n}, k={k}"
        )));
    }
    if k == 0 || k == n {
        return Ok(0.0);
    }
    let nf = n as f64;
    let kf = k as f64;
    Ok(ln_gamma(nf + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0))
}
