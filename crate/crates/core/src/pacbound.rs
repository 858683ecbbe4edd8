//! PAC-Bayes machinery for pretraining bounds.
//!
//! The complexity term is ϱ = √((KL[ρ||π] + ln 1/δ)/(2n)); the harmful
//! mixture bound divides the empirical-plus-complexity budget by the
//! harmful mixture weight α. The average-token-length model estimates the
//! number of unique corpus prompts n from partial zeta sums, and
//! [`verify_pac_bound`] checks the bound's coverage empirically over
//! repeated corpus draws from a finite world and a weighted model ensemble.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kahan::KahanSum;
use crate::probkit::{tv, zeta_partial};
use crate::toyworld::{lm_output, CategoricalSampler, PromptId, TabularLM, ToyWorld};

/// Parameters of the PAC-Bayes bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacConfig {
    /// KL[ρ ‖ π] in nats.
    pub kl_rho_pi: f64,
    /// Unique corpus prompts n.
    pub n_prompts: u64,
    /// Confidence parameter δ ∈ (0, 1).
    pub delta: f64,
    /// Harmful mixture weight α ∈ (0, 1].
    pub alpha: f64,
}

impl PacConfig {
    pub fn new(kl_rho_pi: f64, n_prompts: u64, delta: f64, alpha: f64) -> Result<Self> {
        let cfg = Self { kl_rho_pi, n_prompts, delta, alpha };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kl_rho_pi >= 0.0) || !self.kl_rho_pi.is_finite() {
            return Err(Error::Domain(format!(
                "kl_rho_pi must be >= 0, got {}",
                self.kl_rho_pi
            )));
        }
        if self.n_prompts < 1 {
            return Err(Error::Domain("n_prompts must be >= 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain(format!(
                "delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Domain(format!(
                "alpha must lie in (0,1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Zeta-model parameters for the average-token-length estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlConfig {
    /// Length-distribution exponent s (requires s − t > 1).
    pub s: f64,
    /// Power-law scaling exponent t > 1.
    pub t: f64,
    /// Length cutoff k0 ≥ 1.
    pub k0: u64,
}

impl AtlConfig {
    pub fn new(s: f64, t: f64, k0: u64) -> Result<Self> {
        let cfg = Self { s, t, k0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > 1.0) {
            return Err(Error::Domain(format!("t must exceed 1, got {}", self.t)));
        }
        if !(self.s - self.t > 1.0) {
            return Err(Error::Divergence(format!(
                "need s - t > 1 for the numerator zeta series, got s={} t={}",
                self.s, self.t
            )));
        }
        if self.k0 < 1 {
            return Err(Error::Domain("k0 must be >= 1".into()));
        }
        Ok(())
    }
}

/// The complexity term ϱ = √((KL[ρ‖π] + ln 1/δ) / (2n)).
pub fn varrho(cfg: &PacConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(((cfg.kl_rho_pi + (1.0 / cfg.delta).ln()) / (2.0 * cfg.n_prompts as f64)).sqrt())
}

/// KL of the anisotropic-Gaussian prior/posterior pair with per-weight
/// variance (β·wᵢ)²: Σᵢ wᵢ²/(2σᵢ²) = K/(2β²), weight-independent.
pub fn gaussian_kl(num_params: u64, beta: f64) -> Result<f64> {
    if num_params < 1 {
        return Err(Error::Domain("num_params must be >= 1".into()));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    Ok(num_params as f64 / (2.0 * beta * beta))
}

/// Expected average token length per unique prompt:
/// ζ_partial(s−t, k0) / ζ_partial(s, k0).
pub fn atl_estimate(cfg: &AtlConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(zeta_partial(cfg.s - cfg.t, cfg.k0)? / zeta_partial(cfg.s, cfg.k0)?)
}

/// Unique-prompt estimate n = total corpus tokens / ATL.
pub fn unique_prompts_estimate(total_tokens: f64, atl: f64) -> Result<f64> {
    if !(total_tokens > 0.0) || !(atl > 0.0) {
        return Err(Error::Domain(format!(
            "tokens and atl must both be positive, got {total_tokens}, {atl}"
        )));
    }
    Ok(total_tokens / atl)
}

/// Per-prompt TV loss between the world law and the LM output, over the
/// full explanation axis.
fn tv_loss(lm: &TabularLM, world: &ToyWorld, pid: PromptId) -> Result<f64> {
    tv(world.world_row(pid)?, &lm_output(lm, world, pid)?)
}

/// Mean TV loss over the given prompts.
pub fn tv_empirical_risk(lm: &TabularLM, world: &ToyWorld, prompts: &[PromptId]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Domain("empty prompt set".into()));
    }
    let mut acc = KahanSum::new();
    for &pid in prompts {
        acc.add(tv_loss(lm, world, pid)?);
    }
    Ok(acc.value() / prompts.len() as f64)
}

/// Exact population TV risk under the world's prompt distribution.
pub fn tv_population_risk(lm: &TabularLM, world: &ToyWorld) -> Result<f64> {
    let mut acc = KahanSum::new();
    for (pid, &w) in world.prompt_dist().as_slice().iter().enumerate() {
        if w > 0.0 {
            acc.add(w * tv_loss(lm, world, pid)?);
        }
    }
    Ok(acc.value())
}

/// Population risk split into the harmful / safe mixture components.
///
/// `harmful` and `safe` are `None` when the corresponding mixture weight
/// vanishes; the identity α·harmful + (1−α)·safe = total holds whenever
/// both parts exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskDecomposition {
    pub total: f64,
    pub alpha: f64,
    pub harmful: Option<f64>,
    pub safe: Option<f64>,
}

/// Exact expectation of the TV loss under the harmful and safe mixture
/// components of the prompt distribution.
pub fn population_risk_decomposition(
    lm: &TabularLM,
    world: &ToyWorld,
) -> Result<RiskDecomposition> {
    let harmful_concepts: std::collections::BTreeSet<_> =
        crate::toyworld::harmful_concepts_at(world, world.eta)
            .into_iter()
            .collect();
    let mut harmful_mass = KahanSum::new();
    let mut harmful_risk = KahanSum::new();
    let mut safe_risk = KahanSum::new();
    let mut total = KahanSum::new();
    for (pid, &w) in world.prompt_dist().as_slice().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let loss = w * tv_loss(lm, world, pid)?;
        total.add(loss);
        if harmful_concepts.contains(&world.concept_of(pid)) {
            harmful_mass.add(w);
            harmful_risk.add(loss);
        } else {
            safe_risk.add(loss);
        }
    }
    let alpha = harmful_mass.value();
    let harmful = (alpha > 0.0).then(|| harmful_risk.value() / alpha);
    let safe = (alpha < 1.0).then(|| safe_risk.value() / (1.0 - alpha));
    Ok(RiskDecomposition {
        total: total.value(),
        alpha,
        harmful,
        safe,
    })
}

/// Mean TV risk under the harmful mixture component; `None` when the world
/// has no harmful prompt mass.
pub fn harmful_population_risk(lm: &TabularLM, world: &ToyWorld) -> Result<Option<f64>> {
    Ok(population_risk_decomposition(lm, world)?.harmful)
}

/// The harmful-mixture bound (empirical + ϱ)/α.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarmfulBound {
    pub value: f64,
    /// True when the bound exceeds 1 and is therefore vacuous for a TV loss.
    pub vacuous: bool,
}

pub fn harmful_bound(empirical: f64, rho: f64, alpha: f64) -> Result<HarmfulBound> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0,1], got {alpha}")));
    }
    let value = (empirical + rho) / alpha;
    Ok(HarmfulBound {
        value,
        vacuous: value > 1.0,
    })
}

/// Coverage report for the PAC-Bayes inequality over repeated corpus draws.
#[derive(Debug, Clone, Serialize)]
pub struct PacBoundReport {
    pub config: PacConfig,
    pub seed: u64,
    pub draws: u64,
    pub varrho: f64,
    /// Ensemble-averaged population risk E_ρ[R].
    pub population: f64,
    /// Ensemble-averaged empirical risk, averaged over draws.
    pub mean_empirical: f64,
    /// mean_empirical + ϱ, the average right-hand side of the inequality.
    pub bound: f64,
    /// Fraction of draws with E_ρ[R − R̂_S] ≤ ϱ.
    pub pass_fraction: f64,
    /// pass_fraction ≥ (1 − δ) within 4 binomial standard errors.
    pub pass: bool,
    pub mean_gap: f64,
    pub max_gap: f64,
    pub gap_p50: f64,
    pub gap_p90: f64,
    pub gap_p99: f64,
}

/// Draws `corpus_draws` independent prompt samples S ~ D_P^n (n from
/// `cfg.n_prompts`) and records how often the ensemble-averaged
/// generalization gap stays below ϱ.
///
/// The ensemble is the discrete posterior ρ: weights must form a
/// probability vector. Draws run in parallel on per-draw substreams; the
/// result is independent of thread count.
pub fn verify_pac_bound(
    world: &ToyWorld,
    ensemble: &[(TabularLM, f64)],
    corpus_draws: u64,
    cfg: &PacConfig,
    seed: u64,
) -> Result<PacBoundReport> {
    cfg.validate()?;
    if ensemble.is_empty() {
        return Err(Error::Domain("empty ensemble".into()));
    }
    if corpus_draws < 1 {
        return Err(Error::Domain("corpus_draws must be >= 1".into()));
    }
    let wsum: f64 = ensemble.iter().map(|(_, w)| w).sum();
    if ensemble.iter().any(|(_, w)| *w < 0.0) || (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDist(format!(
            "ensemble weights must form a probability vector (sum {wsum})"
        )));
    }

    // per-model TV tables and populations, computed once
    let mut tv_tables = Vec::with_capacity(ensemble.len());
    for (lm, _) in ensemble {
        let table: Vec<f64> = (0..world.num_prompts())
            .map(|pid| tv_loss(lm, world, pid))
            .collect::<Result<_>>()?;
        tv_tables.push(table);
    }
    let mut population = 0.0;
    for ((_, w), table) in ensemble.iter().zip(&tv_tables) {
        let mut pop = KahanSum::new();
        for (pid, &mass) in world.prompt_dist().as_slice().iter().enumerate() {
            if mass > 0.0 {
                pop.add(mass * table[pid]);
            }
        }
        population += w * pop.value();
    }

    let rho = varrho(cfg)?;
    let n = cfg.n_prompts;
    let dist = world.prompt_dist().as_slice().to_vec();
    let gaps: Vec<f64> = (0..corpus_draws)
        .into_par_iter()
        .map(|draw| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(draw);
            let sampler = CategoricalSampler::new(&dist);
            let mut emp = vec![KahanSum::new(); tv_tables.len()];
            for _ in 0..n {
                let pid = sampler.sample(&mut rng);
                for (acc, table) in emp.iter_mut().zip(&tv_tables) {
                    acc.add(table[pid]);
                }
            }
            let mut emp_mix = 0.0;
            for ((_, w), acc) in ensemble.iter().zip(&emp) {
                emp_mix += w * acc.value() / n as f64;
            }
            population - emp_mix
        })
        .collect();

    let hits = gaps.iter().filter(|&&g| g <= rho).count() as f64;
    let pass_fraction = hits / corpus_draws as f64;
    let se = (pass_fraction * (1.0 - pass_fraction) / corpus_draws as f64).sqrt();
    let pass = pass_fraction >= (1.0 - cfg.delta) - 4.0 * se;

    let mut sorted = gaps.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q =
        |p: f64| sorted[((p * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
    let mut mean = KahanSum::new();
    for &g in &gaps {
        mean.add(g);
    }
    let mean_gap = mean.value() / corpus_draws as f64;
    Ok(PacBoundReport {
        config: *cfg,
        seed,
        draws: corpus_draws,
        varrho: rho,
        population,
        mean_empirical: population - mean_gap,
        bound: population - mean_gap + rho,
        pass_fraction,
        pass,
        mean_gap,
        max_gap: *sorted.last().unwrap(),
        gap_p50: q(0.50),
        gap_p90: q(0.90),
        gap_p99: q(0.99),
    })
}
