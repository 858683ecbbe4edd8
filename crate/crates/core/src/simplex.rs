//! Geometry of the output simplex: harmful-zone membership, exact and
//! Gaussian-approximate relative volumes, ℓ1 ε-expansion, uniform sampling
//! and a Monte Carlo volume oracle.
//!
//! The harmful zone H_h of a zone spec is {x ∈ Δ^{n-1} | Σ_{i<n0} x_i ≥ p}
//! (boundary inclusive); its relative volume equals the binomial CDF
//! P(Bin(n−1, p) ≤ n0−1), computed in log space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kahan::KahanSum;
use crate::probkit::{
    gauss_cdf, gauss_pdf, gauss_sf, ln_gamma, log_binom, Dist, DistanceKind,
};

/// Zone parameters: n explanations of which the first n0 are harmful,
/// jailbreak threshold p, adversary budget eps under distance `dist`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneSpec {
    pub n: usize,
    pub n0: usize,
    pub p: f64,
    pub eps: f64,
    pub dist: DistanceKind,
}

impl ZoneSpec {
    pub fn new(n: usize, n0: usize, p: f64, eps: f64, dist: DistanceKind) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!("zone needs n >= 2, got {n}")));
        }
        if n0 < 1 || n0 > n {
            return Err(Error::Domain(format!("zone needs 1 <= n0 <= n, got n0={n0}, n={n}")));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("zone needs 0 < p < 1, got {p}")));
        }
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::Domain(format!("zone needs eps >= 0, got {eps}")));
        }
        Ok(Self { n, n0, p, eps, dist })
    }
}

/// A Monte Carlo estimate with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: u64,
    pub seed: u64,
}

/// ln of the volume of Δ^{n-1} embedded in R^n: ln(√n / (n−1)!).
pub fn log_simplex_volume(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Domain(format!("simplex volume needs n >= 2, got {n}")));
    }
    Ok(0.5 * (n as f64).ln() - ln_gamma(n as f64))
}

/// Harmful mass of a bare coordinate row: Σ_{i<n0} x_i.
pub(crate) fn harmful_mass(row: &[f64], n0: usize) -> f64 {
    let mut acc = KahanSum::new();
    for &v in &row[..n0] {
        acc.add(v);
    }
    acc.value()
}

/// Membership in H_h (boundary Σ = p counts as harmful).
pub fn in_harmful_zone(x: &Dist, zone: &ZoneSpec) -> Result<bool> {
    if x.len() != zone.n {
        return Err(Error::DimensionMismatch { left: x.len(), right: zone.n });
    }
    Ok(harmful_mass(x.as_slice(), zone.n0) >= zone.p)
}

/// Exact relative volume of H_h in Δ^{n-1}:
/// Σ_{j=0}^{n0−1} C(n−1,j) p^j (1−p)^{n−1−j}, log-space terms, Kahan sum,
/// result clamped to [0, 1]. `eps` is ignored.
pub fn rvol_harmful_exact(zone: &ZoneSpec) -> f64 {
    let m = (zone.n - 1) as u64;
    let ln_p = zone.p.ln();
    let ln_q = (1.0 - zone.p).ln();
    let mut acc = KahanSum::new();
    for j in 0..zone.n0 as u64 {
        let lt = log_binom(m, j).expect("j <= n-1") + j as f64 * ln_p + (m - j) as f64 * ln_q;
        acc.add(lt.exp());
    }
    acc.value().clamp(0.0, 1.0)
}

/// The Gaussian-approximation abscissa
/// a = (n0 − 1 − (n−1)p) / √((n−1)p(1−p)).
pub fn gaussian_a(zone: &ZoneSpec) -> f64 {
    let m = (zone.n - 1) as f64;
    (zone.n0 as f64 - 1.0 - m * zone.p) / (m * zone.p * (1.0 - zone.p)).sqrt()
}

/// CLT companion of [`rvol_harmful_exact`]: Φ(a).
pub fn rvol_harmful_gauss(zone: &ZoneSpec) -> f64 {
    gauss_cdf(gaussian_a(zone))
}

/// ℓ1 ε-expansion of the harmful zone: threshold drops to p − ε/2, budget
/// consumed. For any other `dist` in the admitted family the ℓ1 expansion
/// is a subset of the true expansion (d ≤ ℓ1 pointwise), so the returned
/// zone is a conservative surrogate.
pub fn expand_zone_l1(zone: &ZoneSpec) -> Result<ZoneSpec> {
    if zone.eps >= 2.0 * zone.p {
        return Err(Error::Budget(format!(
            "eps = {} >= 2p = {} erases the safety zone",
            zone.eps,
            2.0 * zone.p
        )));
    }
    Ok(ZoneSpec {
        p: zone.p - zone.eps / 2.0,
        eps: 0.0,
        ..*zone
    })
}

/// The expansion abscissas of a zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AEpsilon {
    /// Abscissa of the unexpanded zone.
    pub a: f64,
    /// a + √(n−1)·ε.
    pub a_eps: f64,
    /// Abscissa of the ℓ1-expanded zone (threshold p − ε/2).
    pub a_prime: f64,
}

/// Computes a_ε = a + √(n−1)·ε and a′ (abscissa of the expanded zone).
///
/// a′ > a_ε is guaranteed for a ≥ 0 (the regime the simplified tail bound
/// lives in); for sufficiently negative a the ordering can flip, e.g.
/// n=101, n0=1, p=0.4, ε=0.1.
pub fn a_epsilon(zone: &ZoneSpec) -> Result<AEpsilon> {
    if !(zone.p < 0.5) {
        return Err(Error::Domain(format!(
            "a_epsilon requires p < 1/2, got p = {}",
            zone.p
        )));
    }
    if !(zone.eps > 0.0) {
        return Err(Error::Budget(format!(
            "a_epsilon requires eps > 0, got {}",
            zone.eps
        )));
    }
    let expanded = expand_zone_l1(zone)?;
    let a = gaussian_a(zone);
    Ok(AEpsilon {
        a,
        a_eps: a + ((zone.n - 1) as f64).sqrt() * zone.eps,
        a_prime: gaussian_a(&expanded),
    })
}

/// The analytic lower bound on jailbreak probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JailbreakBound {
    /// 1 − γ_s (1 − Φ(a_ε)), clamped to [0, 1].
    pub value: f64,
    /// True when the raw value fell outside [0, 1].
    pub clamped: bool,
    /// Gordon-simplified form 1 − γ_s φ(a_ε)/a_ε, valid when a ≥ 0.
    pub simplified: Option<f64>,
}

/// 1 − γ_s (1 − Φ(a + √(n−1)·ε)), clamped to [0, 1].
pub fn jailbreak_lower_bound(zone: &ZoneSpec, gamma_s: f64) -> JailbreakBound {
    assert!(gamma_s >= 0.0, "gamma_s must be nonnegative");
    let a = gaussian_a(zone);
    let a_eps = a + ((zone.n - 1) as f64).sqrt() * zone.eps;
    let raw = 1.0 - gamma_s * gauss_sf(a_eps);
    let value = raw.clamp(0.0, 1.0);
    let simplified = if a >= 0.0 && a_eps > 0.0 {
        Some((1.0 - gamma_s * gauss_pdf(a_eps) / a_eps).clamp(0.0, 1.0))
    } else {
        None
    };
    JailbreakBound { value, clamped: raw != value, simplified }
}

/// Fill `buf` with a uniform point on Δ^{n-1}: normalized i.i.d.
/// standard exponentials.
fn fill_uniform_row(rng: &mut ChaCha8Rng, buf: &mut [f64]) {
    loop {
        let mut total = 0.0;
        for b in buf.iter_mut() {
            let u: f64 = rng.random();
            let e = -(1.0 - u).ln();
            *b = e;
            total += e;
        }
        if total > 0.0 && total.is_finite() {
            for b in buf.iter_mut() {
                *b /= total;
            }
            return;
        }
    }
}

/// Samples per counter-based substream. Fixed so results are independent
/// of thread count.
const MC_CHUNK: u64 = 1 << 16;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `count` i.i.d. uniform points on Δ^{n-1}, deterministic in `seed`.
pub fn sample_uniform(n: usize, seed: u64, count: usize) -> Result<Vec<Dist>> {
    if n < 2 {
        return Err(Error::Domain(format!("sample_uniform needs n >= 2, got {n}")));
    }
    if count < 1 {
        return Err(Error::Domain("sample_uniform needs count >= 1".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![0.0; n];
    for chunk in 0..(count as u64).div_ceil(MC_CHUNK) {
        let mut rng = stream_rng(seed, chunk);
        let hi = ((chunk + 1) * MC_CHUNK).min(count as u64);
        for _ in chunk * MC_CHUNK..hi {
            fill_uniform_row(&mut rng, &mut buf);
            out.push(Dist::new(buf.clone()).expect("normalized row"));
        }
    }
    Ok(out)
}

/// Monte Carlo count of uniform samples satisfying `pred`, chunked into
/// per-stream replicas; the reduction is a commutative sum of counts, so
/// the result is identical for any thread count.
fn mc_count<F>(n: usize, samples: u64, seed: u64, pred: F) -> u64
where
    F: Fn(&[f64]) -> bool + Sync,
{
    (0..samples.div_ceil(MC_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut rng = stream_rng(seed, chunk);
            let hi = ((chunk + 1) * MC_CHUNK).min(samples);
            let mut buf = vec![0.0; n];
            let mut hits = 0u64;
            for _ in chunk * MC_CHUNK..hi {
                fill_uniform_row(&mut rng, &mut buf);
                if pred(&buf) {
                    hits += 1;
                }
            }
            hits
        })
        .sum()
}

fn mc_estimate(hits: u64, samples: u64, seed: u64) -> McEstimate {
    let mean = hits as f64 / samples as f64;
    McEstimate {
        mean,
        std_err: (mean * (1.0 - mean) / samples as f64).sqrt(),
        samples,
        seed,
    }
}

/// Monte Carlo estimate of rvol[H_h] (the oracle for
/// [`rvol_harmful_exact`]). Requires `samples` ≥ 100.
pub fn mc_rvol(zone: &ZoneSpec, samples: u64, seed: u64) -> Result<McEstimate> {
    if samples < 100 {
        return Err(Error::Domain(format!("mc_rvol needs samples >= 100, got {samples}")));
    }
    let (n0, p) = (zone.n0, zone.p);
    let hits = mc_count(zone.n, samples, seed, |row| harmful_mass(row, n0) >= p);
    Ok(mc_estimate(hits, samples, seed))
}

/// Nearest-point distance from `x` to H_h under `zone.dist`.
///
/// Exact for L1/TV (mass-transfer closed form) and for L2/LInf
/// (water-filling over the safe block). For JSD, which has no closed form,
/// the ℓ1 distance is returned as a conservative surrogate: its ε-sublevel
/// sets underapproximate the true JSD expansion (JSD ≤ ℓ1 pointwise).
pub fn zone_distance(x: &Dist, zone: &ZoneSpec) -> Result<f64> {
    if x.len() != zone.n {
        return Err(Error::DimensionMismatch { left: x.len(), right: zone.n });
    }
    let h = harmful_mass(x.as_slice(), zone.n0);
    let deficit = zone.p - h;
    if deficit <= 0.0 {
        return Ok(0.0);
    }
    let safe = &x.as_slice()[zone.n0..];
    Ok(match zone.dist {
        DistanceKind::L1 | DistanceKind::Jsd => 2.0 * deficit,
        DistanceKind::Tv => deficit,
        DistanceKind::L2 => {
            let fill = water_fill(safe, deficit);
            let mut sq = KahanSum::new();
            for &s in safe {
                let d = s.min(fill);
                sq.add(d * d);
            }
            (deficit * deficit / zone.n0 as f64 + sq.value()).sqrt()
        }
        DistanceKind::LInf => (deficit / zone.n0 as f64).max(water_fill(safe, deficit)),
    })
}

/// Smallest cap t with Σ_i min(t, caps_i) = need (assumes Σ caps ≥ need).
fn water_fill(caps: &[f64], need: f64) -> f64 {
    let mut sorted: Vec<f64> = caps.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut below = 0.0; // Σ of capped coordinates
    for (k, &c) in sorted.iter().enumerate() {
        let open = (sorted.len() - k) as f64;
        let t = (need - below) / open;
        if t <= c {
            return t;
        }
        below += c;
    }
    // need exceeds total caps; only reachable through float slack
    sorted.last().copied().unwrap_or(0.0)
}

/// Monte Carlo estimate of rvol[H_h(ε, d)] via the nearest-point distance
/// check. Under L1 this matches the closed-form expanded zone.
pub fn mc_rvol_expanded(zone: &ZoneSpec, samples: u64, seed: u64) -> Result<McEstimate> {
    if samples < 100 {
        return Err(Error::Domain(format!(
            "mc_rvol_expanded needs samples >= 100, got {samples}"
        )));
    }
    let z = *zone;
    let hits = mc_count(zone.n, samples, seed, |row| {
        let h = harmful_mass(row, z.n0);
        let deficit = z.p - h;
        if deficit <= 0.0 {
            return true;
        }
        let d = match z.dist {
            DistanceKind::L1 | DistanceKind::Jsd => 2.0 * deficit,
            DistanceKind::Tv => deficit,
            DistanceKind::L2 => {
                let safe = &row[z.n0..];
                let fill = water_fill(safe, deficit);
                let mut sq = KahanSum::new();
                for &s in safe {
                    let v = s.min(fill);
                    sq.add(v * v);
                }
                (deficit * deficit / z.n0 as f64 + sq.value()).sqrt()
            }
            DistanceKind::LInf => {
                let safe = &row[z.n0..];
                (deficit / z.n0 as f64).max(water_fill(safe, deficit))
            }
        };
        d <= z.eps
    });
    Ok(mc_estimate(hits, samples, seed))
}
