//! The ε-bounded adversary and the jailbreak lower-bound experiment.
//!
//! The adversary holds a pool of held-out plausible queries and may use
//! any of them whose restricted output lies within ε of the direct
//! prompt's output under the configured distance. Success is the
//! two-case disjunction: the direct prompt already sits in the harmful
//! zone, or some in-budget query lands there.
//!
//! The alignment posterior over LM outputs is modeled as a Dirichlet on
//! the concept's output simplex with concentrations ≥ 1 (log-concave
//! density); γ_s is its maximal density ratio against the uniform law
//! over the region left safe after the ℓ1 expansion, which this module
//! computes in closed form.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kahan::KahanSum;
use crate::probkit::{distance, gauss_sf_ln, ln_gamma, Dist, DistanceKind};
use crate::simplex::{gaussian_a, in_harmful_zone, zone_distance, ZoneSpec};
use crate::toyworld::{lm_restricted_output, ConceptId, QueryId, TabularLM, ToyWorld};

/// Deterministic tie-breaking rule for pool search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestQueryId,
}

/// The adversary's budget, distance measure and searchable query pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    pub eps: f64,
    pub dist: DistanceKind,
    pub query_pool: Vec<QueryId>,
    #[serde(default)]
    pub tie_break: TieBreak,
}

impl AdversaryConfig {
    /// Checks the pool against a target concept: nonempty, all plausible.
    pub fn validate_for(&self, world: &ToyWorld, concept: ConceptId) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::Domain(format!("eps must be >= 0, got {}", self.eps)));
        }
        if self.query_pool.is_empty() {
            return Err(Error::Domain("empty query pool".into()));
        }
        for &q in &self.query_pool {
            if !world.is_plausible(q, concept) {
                return Err(Error::Domain(format!(
                    "pool query {q} implausible with concept {concept}"
                )));
            }
        }
        Ok(())
    }
}

/// Dirichlet posterior over the concept's output simplex. Concentrations
/// stay ≥ 1 so the log-density is concave and the γ_s maximizer is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletPosterior {
    concentration: Vec<f64>,
}

impl DirichletPosterior {
    pub fn new(concentration: Vec<f64>) -> Result<Self> {
        if concentration.len() < 2 {
            return Err(Error::Domain("posterior needs at least 2 coordinates".into()));
        }
        for (i, &a) in concentration.iter().enumerate() {
            if !(a >= 1.0) || !a.is_finite() {
                return Err(Error::Domain(format!(
                    "concentration[{i}] = {a} must be >= 1 (log-concave density)"
                )));
            }
        }
        Ok(Self { concentration })
    }

    pub fn dim(&self) -> usize {
        self.concentration.len()
    }

    pub fn concentration(&self) -> &[f64] {
        &self.concentration
    }

    /// ln of the standard Dirichlet density at x (projected coordinates).
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.concentration.len() {
            return Err(Error::DimensionMismatch { left: x.len(), right: self.concentration.len() });
        }
        let total: f64 = self.concentration.iter().sum();
        let mut v = ln_gamma(total);
        for (&a, &xi) in self.concentration.iter().zip(x) {
            v -= ln_gamma(a);
            if a > 1.0 {
                if xi <= 0.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                v += (a - 1.0) * xi.ln();
            }
        }
        Ok(v)
    }

    fn sample_row(&self, rng: &mut ChaCha8Rng, buf: &mut [f64]) {
        loop {
            let mut total = 0.0;
            for (b, &a) in buf.iter_mut().zip(&self.concentration) {
                let g = Gamma::new(a, 1.0).expect("validated concentration");
                let v = g.sample(rng);
                *b = v;
                total += v;
            }
            if total > 0.0 && total.is_finite() {
                for b in buf.iter_mut() {
                    *b /= total;
                }
                return;
            }
        }
    }
}

/// Zone spec sized for a concept's restricted explanation sets.
pub fn zone_for_concept(
    world: &ToyWorld,
    concept: ConceptId,
    p: f64,
    eps: f64,
    dist: DistanceKind,
) -> Result<ZoneSpec> {
    if concept >= world.num_concepts {
        return Err(Error::Domain(format!("concept {concept} out of range")));
    }
    let sets = world.concept_sets(concept);
    ZoneSpec::new(sets.n(), sets.n0(), p, eps, dist)
}

/// Whether (query, concept) drives the LM's restricted output into the
/// harmful zone.
pub fn is_jailbroken(
    lm: &TabularLM,
    world: &ToyWorld,
    query: QueryId,
    concept: ConceptId,
    zone: &ZoneSpec,
) -> Result<bool> {
    let pid = world
        .prompt_id(query, concept)
        .ok_or_else(|| Error::Domain(format!("prompt ({query},{concept}) implausible")))?;
    let (out, _) = lm_restricted_output(lm, world, pid)?;
    in_harmful_zone(&out, zone)
}

/// Outcome of a pool search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchOutcome {
    pub best_query: QueryId,
    /// Distance moved by the chosen query (0 when the pool is infeasible).
    pub moved_distance: f64,
    /// Direct prompt in the zone, or the best in-budget query in the zone.
    pub success: bool,
    pub direct_harmful_mass: f64,
    pub best_harmful_mass: f64,
    pub feasible_count: usize,
}

fn harmful_mass_of(out: &Dist, n0: usize) -> f64 {
    let mut acc = KahanSum::new();
    for &v in &out.as_slice()[..n0] {
        acc.add(v);
    }
    acc.value()
}

/// Scans the pool for in-budget queries and returns the one maximizing
/// harmful mass (ties to the lowest query id). An empty feasible set falls
/// back to the direct query with success judged on the direct prompt
/// alone.
pub fn search_query(
    lm: &TabularLM,
    world: &ToyWorld,
    concept: ConceptId,
    direct_query: QueryId,
    adv: &AdversaryConfig,
    zone: &ZoneSpec,
) -> Result<SearchOutcome> {
    adv.validate_for(world, concept)?;
    let direct_pid = world
        .prompt_id(direct_query, concept)
        .ok_or_else(|| Error::Domain(format!("direct prompt ({direct_query},{concept}) implausible")))?;
    let (base, _) = lm_restricted_output(lm, world, direct_pid)?;
    if base.len() != zone.n {
        return Err(Error::DimensionMismatch { left: base.len(), right: zone.n });
    }
    let direct_mass = harmful_mass_of(&base, zone.n0);
    let direct_success = in_harmful_zone(&base, zone)?;

    let mut best: Option<(QueryId, f64, f64)> = None; // (query, mass, moved)
    let mut feasible_count = 0usize;
    for &q in &adv.query_pool {
        let pid = world.prompt_id(q, concept).expect("validated pool");
        let (out, _) = lm_restricted_output(lm, world, pid)?;
        let moved = distance(&base, &out, adv.dist)?;
        if moved > adv.eps {
            continue;
        }
        feasible_count += 1;
        let mass = harmful_mass_of(&out, zone.n0);
        let better = match &best {
            None => true,
            Some((bq, bmass, _)) => {
                mass > *bmass || (mass == *bmass && matches!(adv.tie_break, TieBreak::LowestQueryId) && q < *bq)
            }
        };
        if better {
            best = Some((q, mass, moved));
        }
    }

    Ok(match best {
        Some((q, mass, moved)) => SearchOutcome {
            best_query: q,
            moved_distance: moved,
            success: direct_success || mass >= zone.p,
            direct_harmful_mass: direct_mass,
            best_harmful_mass: mass,
            feasible_count,
        },
        None => SearchOutcome {
            best_query: direct_query,
            moved_distance: 0.0,
            success: direct_success,
            direct_harmful_mass: direct_mass,
            best_harmful_mass: direct_mass,
            feasible_count: 0,
        },
    })
}

/// γ_s estimate: the maximal Dirichlet-to-uniform density ratio over the
/// region left safe by the ℓ1 expansion, {x ∈ Δ : Σ_{i<n0} x_i ≤ p − ε/2}.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaSEstimate {
    pub log_ratio: f64,
    pub ratio: f64,
    pub argmax: Vec<f64>,
}

/// Exact maximizer of the concave Dirichlet log-density over the capped
/// simplex: the mode when feasible, otherwise the boundary point with
/// harmful mass τ = p − ε/2 allocated proportionally to (aᵢ − 1) within
/// each block.
pub fn gamma_s_estimate(posterior: &DirichletPosterior, zone: &ZoneSpec) -> Result<GammaSEstimate> {
    if posterior.dim() != zone.n {
        return Err(Error::DimensionMismatch { left: posterior.dim(), right: zone.n });
    }
    let tau = zone.p - zone.eps / 2.0;
    if tau <= 0.0 {
        return Err(Error::Region(format!(
            "expansion threshold p - eps/2 = {tau} leaves no safe region"
        )));
    }
    if zone.n0 >= zone.n {
        return Err(Error::Region("every coordinate is harmful; the safe region is empty".into()));
    }
    let a = posterior.concentration();
    let weights: Vec<f64> = a.iter().map(|&ai| ai - 1.0).collect();
    let w_total: f64 = weights.iter().sum();
    let ln_uniform = ln_gamma(zone.n as f64);

    let argmax: Vec<f64> = if w_total == 0.0 {
        // flat density: any feasible point attains the ratio 1
        let mut x = vec![0.0; zone.n];
        let safe = zone.n - zone.n0;
        for v in x.iter_mut().skip(zone.n0) {
            *v = 1.0 / safe as f64;
        }
        x
    } else {
        let w_h: f64 = weights[..zone.n0].iter().sum();
        let mode_harmful = w_h / w_total;
        if mode_harmful <= tau {
            weights.iter().map(|w| w / w_total).collect()
        } else {
            let w_s = w_total - w_h;
            let mut x = vec![0.0; zone.n];
            for (i, &w) in weights.iter().enumerate() {
                x[i] = if i < zone.n0 {
                    tau * w / w_h
                } else if w_s > 0.0 {
                    (1.0 - tau) * w / w_s
                } else {
                    // all safe concentrations are 1: spread the mass
                    (1.0 - tau) / (zone.n - zone.n0) as f64
                };
            }
            x
        }
    };
    let log_ratio = posterior.log_density(&argmax)? - ln_uniform;
    Ok(GammaSEstimate { log_ratio, ratio: log_ratio.exp(), argmax })
}

/// How the experiment realizes the adversary's movement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AdversaryMode {
    /// Exact nearest-point distance to the harmful zone: succeeds iff the
    /// sampled output lies in the ε-expansion.
    Geometric,
    /// A synthetic candidate pool of mass-transfer perturbations at graded
    /// distances (in-budget rungs plus out-of-budget decoys), searched like
    /// a query pool. L1/TV only, where the transfer path is the optimal
    /// mover.
    SyntheticPool { pool_size: usize },
}

/// Report of a jailbreak lower-bound experiment.
#[derive(Debug, Clone, Serialize)]
pub struct JailbreakExperimentReport {
    pub concept: ConceptId,
    pub zone: ZoneSpec,
    pub concentration: Vec<f64>,
    pub mode: AdversaryMode,
    pub draws: u64,
    pub seed: u64,
    pub empirical: f64,
    pub std_err: f64,
    pub log_gamma_s: f64,
    pub gamma_s: f64,
    pub a: f64,
    pub a_eps: f64,
    /// 1 − γ_s (1 − Φ(a_ε)), clamped to [0, 1].
    pub bound: f64,
    pub bound_clamped: bool,
    /// empirical ≥ bound − 4·std_err.
    pub pass: bool,
}

/// Moves mass `delta` from the safe block onto the harmful block
/// (proportional removal, proportional insertion); the optimal ε-mover
/// under L1/TV.
fn transfer_toward_zone(x: &[f64], n0: usize, delta: f64, out: &mut [f64]) {
    let harmful: f64 = x[..n0].iter().sum();
    let safe = 1.0 - harmful;
    let delta = delta.min(safe);
    out.copy_from_slice(x);
    if safe <= 0.0 || delta <= 0.0 {
        return;
    }
    for v in out.iter_mut().skip(n0) {
        *v -= *v / safe * delta;
    }
    for v in out.iter_mut().take(n0) {
        if harmful > 0.0 {
            *v += *v / harmful * delta;
        } else {
            *v += delta / n0 as f64;
        }
    }
}

/// Draws direct-prompt output points from the posterior and runs the
/// adversary on each; reports the empirical jailbreak rate against the
/// analytic lower bound with 4σ slack.
///
/// Requires the concept to be harmful in the world's labeling and the zone
/// to match the concept's restricted-set sizes.
pub fn jailbreak_experiment(
    world: &ToyWorld,
    concept: ConceptId,
    posterior: &DirichletPosterior,
    zone: &ZoneSpec,
    mode: AdversaryMode,
    draws: u64,
    seed: u64,
) -> Result<JailbreakExperimentReport> {
    Ok(jailbreak_experiment_detailed(world, concept, posterior, zone, mode, draws, seed)?.0)
}

/// One sampled output point and what the adversary achieved on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DrawRecord {
    pub draw: u64,
    /// Harmful mass of the sampled direct-prompt output.
    pub harmful_mass: f64,
    /// Nearest-point distance from the sample to the harmful zone.
    pub dist_to_zone: f64,
    pub success: bool,
}

/// [`jailbreak_experiment`] plus the per-draw records (ordered by draw).
pub fn jailbreak_experiment_detailed(
    world: &ToyWorld,
    concept: ConceptId,
    posterior: &DirichletPosterior,
    zone: &ZoneSpec,
    mode: AdversaryMode,
    draws: u64,
    seed: u64,
) -> Result<(JailbreakExperimentReport, Vec<DrawRecord>)> {
    if !crate::toyworld::harmful_concepts_at(world, world.eta).contains(&concept) {
        return Err(Error::Domain(format!("concept {concept} is not harmful in this world")));
    }
    let sets = world.concept_sets(concept);
    if zone.n != sets.n() || zone.n0 != sets.n0() {
        return Err(Error::Domain(format!(
            "zone ({}, {}) does not match the concept's restricted sets ({}, {})",
            zone.n,
            zone.n0,
            sets.n(),
            sets.n0()
        )));
    }
    if posterior.dim() != zone.n {
        return Err(Error::DimensionMismatch { left: posterior.dim(), right: zone.n });
    }
    if let AdversaryMode::SyntheticPool { pool_size } = mode {
        if pool_size == 0 {
            return Err(Error::Domain("pool_size must be positive".into()));
        }
        if !matches!(zone.dist, DistanceKind::L1 | DistanceKind::Tv) {
            return Err(Error::Domain(
                "synthetic pools realize optimal movement under L1/TV only".into(),
            ));
        }
    }
    if draws < 1 {
        return Err(Error::Domain("draws must be >= 1".into()));
    }

    const CHUNK: u64 = 1 << 12;
    let z = *zone;
    let chunks: Vec<Vec<DrawRecord>> = (0..draws.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let hi = ((chunk + 1) * CHUNK).min(draws);
            let mut x = vec![0.0; z.n];
            let mut moved = vec![0.0; z.n];
            let mut records = Vec::with_capacity((hi - chunk * CHUNK) as usize);
            for draw in chunk * CHUNK..hi {
                posterior.sample_row(&mut rng, &mut x);
                let harmful_mass = crate::simplex::harmful_mass(&x, z.n0);
                let point = Dist::new(x.clone()).expect("sampled simplex point");
                let dist_to_zone = zone_distance(&point, &z).expect("dims validated");
                let success = match mode {
                    AdversaryMode::Geometric => dist_to_zone <= z.eps,
                    AdversaryMode::SyntheticPool { pool_size } => {
                        let direct = harmful_mass >= z.p;
                        let mut pool_hit = false;
                        // rungs at k/pool_size of the budget plus decoys past it
                        for k in 1..=pool_size + 2 {
                            let frac = k as f64 / pool_size as f64;
                            let delta = match z.dist {
                                DistanceKind::L1 => z.eps * frac / 2.0,
                                _ => z.eps * frac,
                            };
                            transfer_toward_zone(&x, z.n0, delta, &mut moved);
                            let db = Dist::new(moved.clone()).expect("simplex point");
                            let dist_moved = distance(&point, &db, z.dist).expect("same dims");
                            if dist_moved > z.eps + 1e-12 {
                                continue;
                            }
                            if crate::simplex::harmful_mass(&moved, z.n0) >= z.p {
                                pool_hit = true;
                            }
                        }
                        direct || pool_hit
                    }
                };
                records.push(DrawRecord { draw, harmful_mass, dist_to_zone, success });
            }
            records
        })
        .collect();
    let records: Vec<DrawRecord> = chunks.into_iter().flatten().collect();

    let successes = records.iter().filter(|r| r.success).count() as u64;
    let empirical = successes as f64 / draws as f64;
    let std_err = (empirical * (1.0 - empirical) / draws as f64).sqrt();
    let gs = gamma_s_estimate(posterior, zone)?;
    let a = gaussian_a(zone);
    let a_eps = a + ((zone.n - 1) as f64).sqrt() * zone.eps;
    let raw = 1.0 - (gs.log_ratio + gauss_sf_ln(a_eps)).exp();
    let bound = raw.clamp(0.0, 1.0);
    let report = JailbreakExperimentReport {
        concept,
        zone: *zone,
        concentration: posterior.concentration().to_vec(),
        mode,
        draws,
        seed,
        empirical,
        std_err,
        log_gamma_s: gs.log_ratio,
        gamma_s: gs.ratio,
        a,
        a_eps,
        bound,
        bound_clamped: raw != bound,
        pass: empirical >= bound - 4.0 * std_err,
    };
    Ok((report, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{build_world, WorldConfig};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;

    /// Harmful concept 0 with an all-harmful support of 6, five designated
    /// safe explanations and one filler: restricted sets (n, n0) = (12, 6).
    fn zone12_config() -> WorldConfig {
        WorldConfig {
            num_queries: 8,
            num_concepts: 2,
            num_explanations: 13,
            num_harmful_explanations: 6,
            num_filler_explanations: 1,
            plausible_queries_per_concept: 6,
            heldout_queries_per_concept: 3,
            support_size: 6,
            harmful_support_count: 6,
            designated_safe_count: 5,
            harmful_concepts: vec![0],
            eta: 0.05,
            dirichlet_alpha: 1.5,
            aligned_queries: true,
        }
    }

    fn zone12_world(seed: u64) -> ToyWorld {
        let w = build_world(&zone12_config(), seed).unwrap();
        let sets = w.concept_sets(0);
        assert_eq!((sets.n(), sets.n0()), (12, 6));
        w
    }

    /// Reference LM that puts `mass` of each harmful-concept row on the
    /// harmful block (uniform within blocks, restricted support).
    fn lm_with_harmful_mass(world: &ToyWorld, concept: ConceptId, mass: f64) -> TabularLM {
        let sets = world.concept_sets(concept);
        let n = world.num_explanations;
        let mut logits = vec![vec![0.0; n]; world.num_prompts()];
        let mut mask = vec![vec![true; n]; world.num_prompts()];
        for pid in world.prompts_of_concept(concept) {
            let mut row = vec![false; n];
            for &e in &sets.e_h {
                row[e] = true;
                logits[pid][e] = (mass.max(1e-300) / sets.e_h.len() as f64).ln();
            }
            for &e in sets.e_s.iter().chain(&sets.e_n) {
                row[e] = true;
                logits[pid][e] =
                    (((1.0 - mass).max(1e-300)) / (sets.n() - sets.n0()) as f64).ln();
            }
            mask[pid] = row;
        }
        TabularLM::with_mask(logits, Some(mask)).unwrap()
    }

    #[test]
    fn jailbreak_membership_cases() {
        let w = zone12_world(1);
        let zone = zone_for_concept(&w, 0, 0.3, 0.0, DistanceKind::L1).unwrap();
        let (q, _) = w.prompt(w.direct_prompts_of_concept(0)[0]);
        // all restricted mass on the safe side → never jailbroken for p > 0
        let safe_lm = lm_with_harmful_mass(&w, 0, 0.0);
        assert!(!is_jailbroken(&safe_lm, &w, q, 0, &zone).unwrap());
        // all mass harmful → jailbroken
        let harm_lm = lm_with_harmful_mass(&w, 0, 1.0);
        assert!(is_jailbroken(&harm_lm, &w, q, 0, &zone).unwrap());
        // boundary mass exactly p counts as jailbroken: pin p to the
        // bit-exact harmful mass the restricted output actually carries
        let edge_lm = lm_with_harmful_mass(&w, 0, 0.3);
        let pid = w.prompt_id(q, 0).unwrap();
        let (out, _) = lm_restricted_output(&edge_lm, &w, pid).unwrap();
        let mass = harmful_mass_of(&out, zone.n0);
        let edge_zone = ZoneSpec::new(zone.n, zone.n0, mass, 0.0, DistanceKind::L1).unwrap();
        assert!(is_jailbroken(&edge_lm, &w, q, 0, &edge_zone).unwrap());
        let above = ZoneSpec::new(
            zone.n,
            zone.n0,
            mass + mass * f64::EPSILON * 4.0,
            0.0,
            DistanceKind::L1,
        )
        .unwrap();
        assert!(!is_jailbroken(&edge_lm, &w, q, 0, &above).unwrap());
        // implausible prompts error
        assert!(is_jailbroken(&safe_lm, &w, w.num_queries, 0, &zone).is_err());
    }

    fn pool_of_heldout(world: &ToyWorld, concept: ConceptId) -> Vec<QueryId> {
        world.heldout_queries_of_concept(concept)
    }

    #[test]
    fn search_equals_brute_force() {
        let w = zone12_world(5);
        let zone = zone_for_concept(&w, 0, 0.4, 0.0, DistanceKind::L1).unwrap();
        let pool = pool_of_heldout(&w, 0);
        assert!(pool.len() >= 3);
        let direct_q = w.prompt(w.direct_prompts_of_concept(0)[0]).0;
        for seed in 0..20u64 {
            let lm = TabularLM::random(w.num_prompts(), w.num_explanations, 1.2, seed);
            for eps in [0.05, 0.2, 0.7, 2.0] {
                let adv = AdversaryConfig {
                    eps,
                    dist: DistanceKind::L1,
                    query_pool: pool.clone(),
                    tie_break: TieBreak::LowestQueryId,
                };
                let got = search_query(&lm, &w, 0, direct_q, &adv, &zone).unwrap();
                // independent exhaustive oracle
                let base = lm_restricted_output(&lm, &w, w.prompt_id(direct_q, 0).unwrap())
                    .unwrap()
                    .0;
                let mut best: Option<(QueryId, f64)> = None;
                let mut any = false;
                for &q in &pool {
                    let out =
                        lm_restricted_output(&lm, &w, w.prompt_id(q, 0).unwrap()).unwrap().0;
                    if distance(&base, &out, DistanceKind::L1).unwrap() <= eps {
                        any = true;
                        let mass = harmful_mass_of(&out, zone.n0);
                        let replace =
                            best.is_none_or(|(bq, bm)| mass > bm || (mass == bm && q < bq));
                        if replace {
                            best = Some((q, mass));
                        }
                    }
                }
                match best {
                    Some((bq, bm)) => {
                        assert_eq!(got.best_query, bq);
                        assert_abs_diff_eq!(got.best_harmful_mass, bm, epsilon = 1e-13);
                        assert_eq!(
                            got.success,
                            harmful_mass_of(&base, zone.n0) >= zone.p || bm >= zone.p
                        );
                        assert!(got.moved_distance <= eps + 1e-12);
                    }
                    None => {
                        assert!(!any);
                        assert_eq!(got.best_query, direct_q);
                        assert_eq!(got.feasible_count, 0);
                    }
                }
                // the l1 diameter of the simplex is 2: everything feasible
                if eps >= 2.0 {
                    assert_eq!(got.feasible_count, pool.len());
                }
            }
        }
    }

    #[test]
    fn zero_budget_search_reduces_to_direct_prompt() {
        let w = zone12_world(7);
        let zone = zone_for_concept(&w, 0, 0.5, 0.0, DistanceKind::L1).unwrap();
        let pool = pool_of_heldout(&w, 0);
        let direct_q = w.prompt(w.direct_prompts_of_concept(0)[0]).0;
        let lm = TabularLM::random(w.num_prompts(), w.num_explanations, 1.0, 3);
        let adv = AdversaryConfig {
            eps: 0.0,
            dist: DistanceKind::L1,
            query_pool: pool,
            tie_break: TieBreak::LowestQueryId,
        };
        let got = search_query(&lm, &w, 0, direct_q, &adv, &zone).unwrap();
        // random rows differ, so nothing is feasible at eps = 0
        assert_eq!(got.feasible_count, 0);
        assert_eq!(
            got.success,
            is_jailbroken(&lm, &w, direct_q, 0, &zone).unwrap()
        );
    }

    // ---- gamma_s oracles -------------------------------------------------

    fn project_simplex(v: &[f64]) -> Vec<f64> {
        let mut u = v.to_vec();
        u.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut cumsum = 0.0;
        let mut theta = 0.0;
        for (i, &ui) in u.iter().enumerate() {
            cumsum += ui;
            let t = (cumsum - 1.0) / (i + 1) as f64;
            if ui - t > 0.0 {
                theta = t;
            }
        }
        v.iter().map(|&x| (x - theta).max(0.0)).collect()
    }

    fn project_cap(v: &[f64], n0: usize, tau: f64) -> Vec<f64> {
        let s: f64 = v[..n0].iter().sum();
        if s <= tau {
            return v.to_vec();
        }
        let shift = (s - tau) / n0 as f64;
        let mut out = v.to_vec();
        for x in out.iter_mut().take(n0) {
            *x -= shift;
        }
        out
    }

    /// Dykstra projection onto {x ∈ Δ : Σ_{i<n0} x ≤ τ}.
    fn project_region(v: &[f64], n0: usize, tau: f64) -> Vec<f64> {
        let n = v.len();
        let mut x = v.to_vec();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for _ in 0..300 {
            let xp: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + b).collect();
            let y = project_simplex(&xp);
            for i in 0..n {
                p[i] = xp[i] - y[i];
            }
            let yq: Vec<f64> = y.iter().zip(&q).map(|(a, b)| a + b).collect();
            let z = project_cap(&yq, n0, tau);
            for i in 0..n {
                q[i] = yq[i] - z[i];
            }
            x = z;
        }
        x
    }

    /// Projected gradient ascent with backtracking and random restarts; the
    /// independent oracle for the closed-form maximizer.
    fn pga_log_gamma_s(
        posterior: &DirichletPosterior,
        zone: &ZoneSpec,
        restarts: usize,
        seed: u64,
    ) -> f64 {
        use rand::SeedableRng;
        let tau = zone.p - zone.eps / 2.0;
        let n = zone.n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = f64::NEG_INFINITY;
        let floor = 1e-12;
        for _ in 0..restarts {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            let mut x = project_region(
                &raw.iter().map(|v| v / total).collect::<Vec<_>>(),
                zone.n0,
                tau,
            );
            let mut value = posterior.log_density(&x).unwrap();
            for _ in 0..400 {
                let grad: Vec<f64> = posterior
                    .concentration()
                    .iter()
                    .zip(&x)
                    .map(|(&a, &xi)| (a - 1.0) / xi.max(floor))
                    .collect();
                let mut lr = 0.05;
                let mut improved = false;
                while lr > 1e-12 {
                    let cand: Vec<f64> =
                        x.iter().zip(&grad).map(|(xi, g)| xi + lr * g).collect();
                    let cand = project_region(&cand, zone.n0, tau);
                    let v = posterior.log_density(&cand).unwrap();
                    if v > value {
                        x = cand;
                        value = v;
                        improved = true;
                        break;
                    }
                    lr *= 0.5;
                }
                if !improved {
                    break;
                }
            }
            best = best.max(value);
        }
        best - ln_gamma(n as f64)
    }

    #[test]
    fn gamma_s_uniform_posterior_is_one() {
        let zone = ZoneSpec::new(5, 2, 0.2, 0.1, DistanceKind::L1).unwrap();
        let posterior = DirichletPosterior::new(vec![1.0; 5]).unwrap();
        let got = gamma_s_estimate(&posterior, &zone).unwrap();
        assert_abs_diff_eq!(got.log_ratio, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got.ratio, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gamma_s_mode_inside_matches_analytic_density_and_pga() {
        // mode harmful mass (2-1)/(sum-4) must stay below τ = 0.35
        let posterior = DirichletPosterior::new(vec![2.0, 7.0, 5.0, 4.0]).unwrap();
        let zone = ZoneSpec::new(4, 1, 0.4, 0.1, DistanceKind::L1).unwrap();
        let got = gamma_s_estimate(&posterior, &zone).unwrap();
        let mode = [1.0 / 14.0, 6.0 / 14.0, 4.0 / 14.0, 3.0 / 14.0];
        assert!(mode[0] < zone.p - zone.eps / 2.0);
        let want = posterior.log_density(&mode).unwrap() - ln_gamma(4.0);
        assert_abs_diff_eq!(got.log_ratio, want, epsilon = 1e-12);
        let pga = pga_log_gamma_s(&posterior, &zone, 8, 42);
        assert_relative_eq!(got.log_ratio, pga, max_relative = 1e-6);
        // the density ratio at the mode dominates its simplex average of 1
        assert!(got.ratio >= 1.0);
    }

    #[test]
    fn gamma_s_boundary_case_matches_pga_and_dominates_probes() {
        use rand::SeedableRng;
        // large harmful concentration pushes the mode past the cap
        let posterior = DirichletPosterior::new(vec![6.0, 3.0, 2.0, 2.0, 1.0]).unwrap();
        let zone = ZoneSpec::new(5, 2, 0.2, 0.15, DistanceKind::L1).unwrap();
        let got = gamma_s_estimate(&posterior, &zone).unwrap();
        let tau = zone.p - zone.eps / 2.0;
        let hm: f64 = got.argmax[..2].iter().sum();
        assert_abs_diff_eq!(hm, tau, epsilon = 1e-12);
        let pga = pga_log_gamma_s(&posterior, &zone, 12, 7);
        assert_relative_eq!(got.log_ratio, pga, max_relative = 1e-6);

        // the maximizer dominates the density ratio at random feasible points
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            let x = project_region(
                &raw.iter().map(|v| v / total).collect::<Vec<_>>(),
                zone.n0,
                tau,
            );
            let probe = posterior.log_density(&x).unwrap() - ln_gamma(5.0);
            assert!(got.log_ratio >= probe - 1e-9);
        }
    }

    #[test]
    fn gamma_s_grid_oracle_n3() {
        let posterior = DirichletPosterior::new(vec![3.0, 2.0, 4.0]).unwrap();
        let zone = ZoneSpec::new(3, 1, 0.3, 0.1, DistanceKind::L1).unwrap();
        let got = gamma_s_estimate(&posterior, &zone).unwrap();
        let tau = zone.p - zone.eps / 2.0;
        let grid = 800usize;
        let mut best = f64::NEG_INFINITY;
        for i in 0..=grid {
            let x0 = i as f64 / grid as f64;
            if x0 > tau {
                break;
            }
            for j in 0..=(grid - i) {
                let x1 = j as f64 / grid as f64;
                let x2 = 1.0 - x0 - x1;
                if x2 < 0.0 {
                    continue;
                }
                best = best.max(posterior.log_density(&[x0, x1, x2]).unwrap());
            }
        }
        let grid_ratio = best - ln_gamma(3.0);
        assert_relative_eq!(got.log_ratio, grid_ratio, max_relative = 1e-3);
        assert!(got.log_ratio >= grid_ratio - 1e-12);
    }

    #[test]
    fn gamma_s_region_errors() {
        let posterior = DirichletPosterior::new(vec![2.0, 2.0, 2.0]).unwrap();
        // eps >= 2p empties the region
        let zone = ZoneSpec::new(3, 1, 0.1, 0.25, DistanceKind::L1).unwrap();
        assert!(matches!(
            gamma_s_estimate(&posterior, &zone),
            Err(Error::Region(_))
        ));
        // n0 = n leaves no safe coordinates
        let zone = ZoneSpec::new(3, 3, 0.4, 0.1, DistanceKind::L1).unwrap();
        assert!(gamma_s_estimate(&posterior, &zone).is_err());
        assert!(DirichletPosterior::new(vec![0.5, 2.0]).is_err());
    }

    // ---- jailbreak experiments -------------------------------------------

    #[test]
    fn experiment_concentrated_in_harmful_zone_trivially_passes() {
        let w = zone12_world(9);
        let zone = zone_for_concept(&w, 0, 0.1, 0.05, DistanceKind::L1).unwrap();
        // heavy harmful concentrations put essentially all draws in H_h
        let mut conc = vec![1.0; 12];
        for c in conc.iter_mut().take(6) {
            *c = 50.0;
        }
        let posterior = DirichletPosterior::new(conc).unwrap();
        let report = jailbreak_experiment(
            &w,
            0,
            &posterior,
            &zone,
            AdversaryMode::Geometric,
            2000,
            3,
        )
        .unwrap();
        assert_eq!(report.empirical, 1.0);
        assert!(report.bound <= 1.0);
        assert!(report.pass);
    }

    #[test]
    fn experiment_uniform_posterior_beats_bound() {
        let w = zone12_world(11);
        let zone = zone_for_concept(&w, 0, 0.1, 0.05, DistanceKind::L1).unwrap();
        let posterior = DirichletPosterior::new(vec![1.0; 12]).unwrap();
        let report = jailbreak_experiment(
            &w,
            0,
            &posterior,
            &zone,
            AdversaryMode::Geometric,
            20_000,
            17,
        )
        .unwrap();
        assert!(report.pass, "empirical {} < bound {}", report.empirical, report.bound);
        assert!(report.a > 0.0);
        // determinism
        let again = jailbreak_experiment(
            &w,
            0,
            &posterior,
            &zone,
            AdversaryMode::Geometric,
            20_000,
            17,
        )
        .unwrap();
        assert_eq!(report.empirical, again.empirical);
    }

    #[test]
    fn experiment_pool_mode_matches_geometric_under_l1() {
        let w = zone12_world(13);
        let zone = zone_for_concept(&w, 0, 0.12, 0.08, DistanceKind::L1).unwrap();
        let posterior =
            DirichletPosterior::new(vec![2.0, 1.5, 1.0, 1.0, 2.5, 1.0, 1.5, 1.0, 1.0, 2.0, 1.0, 1.0])
                .unwrap();
        let geo = jailbreak_experiment(
            &w,
            0,
            &posterior,
            &zone,
            AdversaryMode::Geometric,
            5_000,
            23,
        )
        .unwrap();
        let pool = jailbreak_experiment(
            &w,
            0,
            &posterior,
            &zone,
            AdversaryMode::SyntheticPool { pool_size: 16 },
            5_000,
            23,
        )
        .unwrap();
        // the top in-budget rung moves exactly eps, so the pool adversary
        // succeeds exactly when the geometric one does
        assert_eq!(geo.empirical, pool.empirical);
        assert!(pool.pass);
    }

    #[test]
    fn experiment_success_monotone_in_eps() {
        let w = zone12_world(15);
        let posterior = DirichletPosterior::new(vec![1.5; 12]).unwrap();
        let mut prev = -1.0;
        for eps in [0.0, 0.02, 0.05, 0.1, 0.15] {
            let zone = zone_for_concept(&w, 0, 0.1, eps, DistanceKind::L1).unwrap();
            let report = jailbreak_experiment(
                &w,
                0,
                &posterior,
                &zone,
                AdversaryMode::Geometric,
                4_000,
                29,
            )
            .unwrap();
            assert!(
                report.empirical >= prev,
                "eps {eps}: {} < {prev}",
                report.empirical
            );
            prev = report.empirical;
        }
    }

    #[test]
    fn experiment_validates_inputs() {
        let w = zone12_world(19);
        let posterior = DirichletPosterior::new(vec![1.0; 12]).unwrap();
        let zone = zone_for_concept(&w, 0, 0.1, 0.05, DistanceKind::L1).unwrap();
        // concept 1 is not harmful
        assert!(jailbreak_experiment(
            &w,
            1,
            &posterior,
            &zone,
            AdversaryMode::Geometric,
            100,
            0
        )
        .is_err());
        // zone sizes must match the restricted sets
        let wrong = ZoneSpec::new(11, 6, 0.1, 0.05, DistanceKind::L1).unwrap();
        assert!(jailbreak_experiment(
            &w,
            0,
            &posterior,
            &wrong,
            AdversaryMode::Geometric,
            100,
            0
        )
        .is_err());
        // synthetic pools reject non-L1/TV distances
        let l2 = ZoneSpec::new(12, 6, 0.1, 0.05, DistanceKind::L2).unwrap();
        assert!(jailbreak_experiment(
            &w,
            0,
            &posterior,
            &l2,
            AdversaryMode::SyntheticPool { pool_size: 4 },
            100,
            0
        )
        .is_err());
    }
}
