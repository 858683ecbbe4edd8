//! Finite probability vectors and distances between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kahan::KahanSum;

/// Constructor tolerance on |Σp − 1|. Inputs closer than this are
/// renormalized; anything further is rejected.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// A point on the probability simplex Δ^{n-1}, n ≥ 2.
///
/// Entries are nonnegative, at most 1, and sum to 1 (renormalized at
/// construction when within [`NORMALIZATION_TOL`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Dist {
    probs: Vec<f64>,
}

impl Dist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDist(format!(
                "need at least 2 entries, got {}",
                probs.len()
            )));
        }
        let mut sum = KahanSum::new();
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || !(0.0..=1.0 + NORMALIZATION_TOL).contains(&p) {
                return Err(Error::InvalidDist(format!("entry {i} = {p} out of [0, 1]")));
            }
            sum.add(p);
        }
        let total = sum.value();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDist(format!(
                "entries sum to {total}, outside 1 ± {NORMALIZATION_TOL}"
            )));
        }
        let mut probs = probs;
        if total != 1.0 {
            for p in &mut probs {
                *p /= total;
            }
        }
        Ok(Self { probs })
    }

    /// Uniform distribution over n ≥ 2 outcomes.
    pub fn uniform(n: usize) -> Self {
        assert!(n >= 2, "Dist needs n >= 2");
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// All mass on outcome `i`.
    pub fn point_mass(n: usize, i: usize) -> Self {
        assert!(n >= 2 && i < n);
        let mut probs = vec![0.0; n];
        probs[i] = 1.0;
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, i: usize) -> f64 {
        self.probs[i]
    }

    /// Indices with nonzero mass.
    pub fn support(&self) -> Vec<usize> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// The distance measures admitted for the bounded adversary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    L1,
    L2,
    LInf,
    Tv,
    Jsd,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 5] = [
        DistanceKind::L1,
        DistanceKind::L2,
        DistanceKind::LInf,
        DistanceKind::Tv,
        DistanceKind::Jsd,
    ];
}

impl std::fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DistanceKind::L1 => "l1",
            DistanceKind::L2 => "l2",
            DistanceKind::LInf => "linf",
            DistanceKind::Tv => "tv",
            DistanceKind::Jsd => "jsd",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(DistanceKind::L1),
            "l2" => Ok(DistanceKind::L2),
            "linf" | "loo" => Ok(DistanceKind::LInf),
            "tv" => Ok(DistanceKind::Tv),
            "jsd" => Ok(DistanceKind::Jsd),
            other => Err(Error::Domain(format!("unknown distance kind '{other}'"))),
        }
    }
}

fn check_len(p: &Dist, q: &Dist) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(())
}

/// Total variation distance ½ Σ |p_i − q_i| ∈ [0, 1].
pub fn tv(p: &Dist, q: &Dist) -> Result<f64> {
    check_len(p, q)?;
    Ok(0.5 * l1_slice(p.as_slice(), q.as_slice()))
}

pub(crate) fn l1_slice(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for (a, b) in p.iter().zip(q) {
        acc.add((a - b).abs());
    }
    acc.value()
}

fn l2_slice(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = KahanSum::new();
    for (a, b) in p.iter().zip(q) {
        let d = a - b;
        acc.add(d * d);
    }
    acc.value().sqrt()
}

fn linf_slice(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Kullback–Leibler divergence Σ p_i ln(p_i/q_i) in nats, with the
/// conventions 0·ln 0 := 0 and q_i = 0 ∧ p_i > 0 → +∞.
pub fn kl(p: &Dist, q: &Dist) -> Result<f64> {
    check_len(p, q)?;
    let mut acc = KahanSum::new();
    for (&a, &b) in p.as_slice().iter().zip(q.as_slice()) {
        if a == 0.0 {
            continue;
        }
        if b == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc.add(a * (a / b).ln());
    }
    Ok(acc.value())
}

fn jsd_slice(p: &[f64], q: &[f64]) -> f64 {
    // ½ KL(p || m) + ½ KL(q || m), m = (p+q)/2, in nats; maximal value ln 2.
    let mut acc = KahanSum::new();
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc.add(0.5 * a * (a / m).ln());
        }
        if b > 0.0 {
            acc.add(0.5 * b * (b / m).ln());
        }
    }
    acc.value().max(0.0)
}

/// The named distance between two equal-length distributions.
pub fn distance(p: &Dist, q: &Dist, kind: DistanceKind) -> Result<f64> {
    check_len(p, q)?;
    Ok(match kind {
        DistanceKind::L1 => l1_slice(p.as_slice(), q.as_slice()),
        DistanceKind::L2 => l2_slice(p.as_slice(), q.as_slice()),
        DistanceKind::LInf => linf_slice(p.as_slice(), q.as_slice()),
        DistanceKind::Tv => 0.5 * l1_slice(p.as_slice(), q.as_slice()),
        DistanceKind::Jsd => jsd_slice(p.as_slice(), q.as_slice()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn d(v: &[f64]) -> Dist {
        Dist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn tv_spec_cases() {
        assert_eq!(tv(&d(&[0.5, 0.5]), &d(&[0.5, 0.5])).unwrap(), 0.0);
        assert_eq!(tv(&d(&[1.0, 0.0]), &d(&[0.0, 1.0])).unwrap(), 1.0);
        assert_abs_diff_eq!(
            tv(&d(&[0.7, 0.3]), &d(&[0.4, 0.6])).unwrap(),
            0.3,
            epsilon = 1e-15
        );
    }

    #[test]
    fn distance_spec_cases() {
        let p = d(&[1.0, 0.0]);
        let q = d(&[0.0, 1.0]);
        assert_eq!(distance(&p, &q, DistanceKind::L1).unwrap(), 2.0);
        assert_abs_diff_eq!(
            distance(&p, &q, DistanceKind::Jsd).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn length_mismatch_rejected() {
        let p = d(&[0.5, 0.5]);
        let q = d(&[0.3, 0.3, 0.4]);
        assert!(tv(&p, &q).is_err());
        assert!(distance(&p, &q, DistanceKind::L2).is_err());
        assert!(kl(&p, &q).is_err());
    }

    #[test]
    fn kl_infinite_off_support() {
        let p = d(&[0.5, 0.5]);
        let q = d(&[1.0, 0.0]);
        assert_eq!(kl(&p, &q).unwrap(), f64::INFINITY);
        assert_eq!(kl(&q, &p).unwrap(), std::f64::consts::LN_2);
    }

    #[test]
    fn constructor_renormalizes_within_tolerance() {
        let p = Dist::new(vec![0.5 + 4e-10, 0.5 + 4e-10]).unwrap();
        let s: f64 = p.as_slice().iter().sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-15);
        assert!(Dist::new(vec![0.5, 0.51]).is_err());
        assert!(Dist::new(vec![0.5, 0.5, -1e-6, 1e-6]).is_err());
        assert!(Dist::new(vec![1.0]).is_err());
        assert!(Dist::new(vec![f64::NAN, 1.0]).is_err());
    }

    fn dist_pair() -> impl Strategy<Value = (Dist, Dist)> {
        (2usize..12).prop_flat_map(|n| {
            let entry = 1e-4..1.0f64;
            (
                proptest::collection::vec(entry.clone(), n),
                proptest::collection::vec(entry, n),
            )
                .prop_map(|(a, b)| {
                    let na: f64 = a.iter().sum();
                    let nb: f64 = b.iter().sum();
                    (
                        Dist::new(a.iter().map(|x| x / na).collect()).unwrap(),
                        Dist::new(b.iter().map(|x| x / nb).collect()).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn tv_is_a_metric_and_half_l1((p, q) in dist_pair()) {
            let t = tv(&p, &q).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&t));
            prop_assert!((t - tv(&q, &p).unwrap()).abs() < 1e-15);
            prop_assert!(tv(&p, &p).unwrap() == 0.0);
            let l1 = distance(&p, &q, DistanceKind::L1).unwrap();
            prop_assert!((l1 - 2.0 * t).abs() < 1e-14);
        }

        #[test]
        fn tv_triangle_inequality((p, q) in dist_pair(), seed in 0u64..1000) {
            // third point from a hashed reseed of the pair dimensions
            let n = p.len();
            let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((seed + i as u64) % 7) as f64).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            let r = Dist::new(v).unwrap();
            let pq = tv(&p, &q).unwrap();
            let pr = tv(&p, &r).unwrap();
            let rq = tv(&r, &q).unwrap();
            prop_assert!(pq <= pr + rq + 1e-14);
        }

        #[test]
        fn pinsker((p, q) in dist_pair()) {
            let t = tv(&p, &q).unwrap();
            let k = kl(&p, &q).unwrap();
            prop_assert!(k.is_finite());
            prop_assert!(t <= (k / 2.0).sqrt() + 1e-12);
        }

        #[test]
        fn l1_dominates_jsd_tv_and_lp((p, q) in dist_pair()) {
            let l1 = distance(&p, &q, DistanceKind::L1).unwrap();
            let jsd = distance(&p, &q, DistanceKind::Jsd).unwrap();
            let t = distance(&p, &q, DistanceKind::Tv).unwrap();
            let l2 = distance(&p, &q, DistanceKind::L2).unwrap();
            let li = distance(&p, &q, DistanceKind::LInf).unwrap();
            prop_assert!(l1 + 1e-12 >= 2.0 * jsd);
            prop_assert!(l1 + 1e-15 >= 2.0 * t);
            prop_assert!(l1 + 1e-15 >= l2);
            prop_assert!(l1 + 1e-15 >= li);
            prop_assert!(l2 + 1e-15 >= li);
        }

        #[test]
        fn all_kinds_total_symmetric_nonnegative((p, q) in dist_pair()) {
            for kind in DistanceKind::ALL {
                let ab = distance(&p, &q, kind).unwrap();
                let ba = distance(&q, &p, kind).unwrap();
                prop_assert!(ab.is_finite() && ab >= 0.0);
                prop_assert!((ab - ba).abs() < 1e-13);
                prop_assert!(distance(&p, &p, kind).unwrap().abs() < 1e-15);
            }
        }
    }
}
