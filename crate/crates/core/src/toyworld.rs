//! Finite concept/query/explanation worlds.
//!
//! A world fixes a query set, a concept set and an explanation set, a
//! plausibility relation over (query, concept) prompts, and for every
//! plausible prompt a ground-truth explanation distribution whose support
//! is determined by the concept alone (query-dependent probabilities on a
//! query-independent support). Explanations carry harmful/safe labels plus
//! a small filler block; a prompt distribution supported on a strict
//! subset of the plausible prompts generates pretraining corpora.
//!
//! Tabular language models are per-prompt logit rows with softmax decoding
//! at temperature 1. Reference models may carry structural-zero masks;
//! trainable models may not.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::kahan::KahanSum;
use crate::probkit::Dist;

pub type QueryId = usize;
pub type ConceptId = usize;
pub type ExplanationId = usize;
/// Index into the world's plausible-prompt list.
pub type PromptId = usize;

fn default_eta() -> f64 {
    0.05
}
fn default_alpha() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

/// Construction parameters for [`build_world`].
///
/// Explanations are laid out in blocks: ids `[0, num_harmful)` are harmful,
/// `[num_harmful, num_explanations - num_filler)` are safe, the trailing
/// `num_filler` ids are filler (never harmful, never safe; they only pad
/// the LM output domain).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub num_queries: usize,
    pub num_concepts: usize,
    pub num_explanations: usize,
    pub num_harmful_explanations: usize,
    #[serde(default)]
    pub num_filler_explanations: usize,
    pub plausible_queries_per_concept: usize,
    /// Plausible queries per concept withheld from the prompt distribution
    /// (the adversary's search space). At least 1.
    pub heldout_queries_per_concept: usize,
    pub support_size: usize,
    /// Harmful explanations inside each harmful-intended concept's support.
    pub harmful_support_count: usize,
    /// Human-designed safe explanations attached to each harmful-intended
    /// concept, outside its support.
    #[serde(default)]
    pub designated_safe_count: usize,
    pub harmful_concepts: Vec<ConceptId>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_alpha")]
    pub dirichlet_alpha: f64,
    /// All concepts share one plausible query set. Keeps every safety
    /// mapping query-compatible.
    #[serde(default = "default_true")]
    pub aligned_queries: bool,
}

impl WorldConfig {
    fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Construction(msg));
        if self.num_queries < 2 || self.num_concepts < 2 || self.num_explanations < 2 {
            return err("world sizes must all be >= 2".into());
        }
        if self.plausible_queries_per_concept < 2
            || self.plausible_queries_per_concept > self.num_queries
        {
            return err(format!(
                "plausible_queries_per_concept must lie in [2, {}]",
                self.num_queries
            ));
        }
        if self.heldout_queries_per_concept < 1
            || self.heldout_queries_per_concept >= self.plausible_queries_per_concept
        {
            return err(
                "need 1 <= heldout_queries_per_concept < plausible_queries_per_concept".into(),
            );
        }
        if self.num_harmful_explanations + self.num_filler_explanations >= self.num_explanations {
            return err("harmful + filler blocks leave no safe explanations".into());
        }
        if self.support_size < 1 || self.support_size >= self.num_explanations {
            return err(format!(
                "support_size must lie in [1, {})",
                self.num_explanations
            ));
        }
        if self.harmful_concepts.is_empty() {
            return err("at least one concept must be flagged harmful-intended".into());
        }
        let mut seen = BTreeSet::new();
        for &c in &self.harmful_concepts {
            if c >= self.num_concepts || !seen.insert(c) {
                return err(format!("bad harmful concept id {c}"));
            }
        }
        if self.harmful_support_count < 1 || self.harmful_support_count > self.support_size {
            return err("need 1 <= harmful_support_count <= support_size".into());
        }
        if self.harmful_support_count > self.num_harmful_explanations {
            return err("support requires more harmful explanations than exist".into());
        }
        let safe_block =
            self.num_explanations - self.num_harmful_explanations - self.num_filler_explanations;
        if self.support_size > safe_block {
            return err("safe-concept support does not fit in the safe block".into());
        }
        if self.support_size - self.harmful_support_count + self.designated_safe_count > safe_block
        {
            return err("designated safe set does not fit outside the support".into());
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return err(format!("eta must lie in (0,1), got {}", self.eta));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return err("dirichlet_alpha must be positive".into());
        }
        Ok(())
    }
}

/// A fully explicit finite world.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub num_queries: usize,
    pub num_concepts: usize,
    pub num_explanations: usize,
    /// Harmfulness threshold η for concept labeling.
    pub eta: f64,
    harmful_expl: Vec<bool>,
    filler_expl: Vec<bool>,
    plausible: Vec<Vec<bool>>, // [query][concept]
    prompts: Vec<(QueryId, ConceptId)>,
    prompt_index: Vec<Vec<Option<PromptId>>>, // [query][concept]
    support_of_concept: Vec<Vec<ExplanationId>>,
    designated_safe: Vec<Vec<ExplanationId>>,
    world_probs: Vec<Dist>, // per prompt, full explanation axis
    direct_support: Vec<bool>,
    prompt_dist: Dist,
}

/// Per-concept explanation sets relative to the LM output domain:
/// harmful E_h(c), safe E_s(c), residual filler E_n(c).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptSets {
    pub e_h: Vec<ExplanationId>,
    pub e_s: Vec<ExplanationId>,
    pub e_n: Vec<ExplanationId>,
}

impl ConceptSets {
    /// Output-simplex coordinate order: harmful first, then safe, then filler.
    pub fn restricted(&self) -> Vec<ExplanationId> {
        let mut v = self.e_h.clone();
        v.extend_from_slice(&self.e_s);
        v.extend_from_slice(&self.e_n);
        v
    }

    pub fn n(&self) -> usize {
        self.e_h.len() + self.e_s.len() + self.e_n.len()
    }

    pub fn n0(&self) -> usize {
        self.e_h.len()
    }
}

/// Output of [`label_harmful_concepts`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HarmfulLabeling {
    pub harmful: Vec<ConceptId>,
    pub sets: Vec<ConceptSets>,
}

impl ToyWorld {
    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn prompt(&self, pid: PromptId) -> (QueryId, ConceptId) {
        self.prompts[pid]
    }

    pub fn concept_of(&self, pid: PromptId) -> ConceptId {
        self.prompts[pid].1
    }

    pub fn is_plausible(&self, q: QueryId, c: ConceptId) -> bool {
        q < self.num_queries && c < self.num_concepts && self.plausible[q][c]
    }

    pub fn prompt_id(&self, q: QueryId, c: ConceptId) -> Option<PromptId> {
        if q < self.num_queries && c < self.num_concepts {
            self.prompt_index[q][c]
        } else {
            None
        }
    }

    pub fn world_row(&self, pid: PromptId) -> Result<&Dist> {
        self.world_probs
            .get(pid)
            .ok_or(Error::Domain(format!("prompt {pid} out of range")))
    }

    pub fn is_direct(&self, pid: PromptId) -> bool {
        self.direct_support[pid]
    }

    pub fn prompt_dist(&self) -> &Dist {
        &self.prompt_dist
    }

    pub fn support_of_concept(&self, c: ConceptId) -> &[ExplanationId] {
        &self.support_of_concept[c]
    }

    pub fn designated_safe(&self, c: ConceptId) -> &[ExplanationId] {
        &self.designated_safe[c]
    }

    pub fn is_harmful_explanation(&self, e: ExplanationId) -> bool {
        self.harmful_expl[e]
    }

    pub fn is_filler_explanation(&self, e: ExplanationId) -> bool {
        self.filler_expl[e]
    }

    pub fn is_safe_explanation(&self, e: ExplanationId) -> bool {
        !self.harmful_expl[e] && !self.filler_expl[e]
    }

    pub fn prompts_of_concept(&self, c: ConceptId) -> Vec<PromptId> {
        (0..self.num_prompts())
            .filter(|&p| self.concept_of(p) == c)
            .collect()
    }

    pub fn direct_prompts_of_concept(&self, c: ConceptId) -> Vec<PromptId> {
        (0..self.num_prompts())
            .filter(|&p| self.concept_of(p) == c && self.direct_support[p])
            .collect()
    }

    pub fn heldout_queries_of_concept(&self, c: ConceptId) -> Vec<QueryId> {
        (0..self.num_prompts())
            .filter(|&p| self.concept_of(p) == c && !self.direct_support[p])
            .map(|p| self.prompts[p].0)
            .collect()
    }

    /// E_h(c), E_s(c), E_n(c) in the fixed coordinate order.
    pub fn concept_sets(&self, c: ConceptId) -> ConceptSets {
        let mut e_h = Vec::new();
        let mut e_s = Vec::new();
        for &e in &self.support_of_concept[c] {
            if self.harmful_expl[e] {
                e_h.push(e);
            } else {
                e_s.push(e);
            }
        }
        for &e in &self.designated_safe[c] {
            if !e_s.contains(&e) {
                e_s.push(e);
            }
        }
        e_s.sort_unstable();
        let e_n = (0..self.num_explanations)
            .filter(|&e| self.filler_expl[e])
            .collect();
        ConceptSets { e_h, e_s, e_n }
    }

    /// Minimum harmful support mass over the concept's plausible queries.
    pub fn min_harmful_mass(&self, c: ConceptId) -> f64 {
        let sets = self.concept_sets(c);
        let mut min = f64::INFINITY;
        for pid in self.prompts_of_concept(c) {
            let row = self.world_probs[pid].as_slice();
            let mut acc = KahanSum::new();
            for &e in &sets.e_h {
                acc.add(row[e]);
            }
            min = min.min(acc.value());
        }
        min
    }

    /// Full invariant check; run after construction and deserialization.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Construction(msg));
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return err("eta out of (0,1)".into());
        }
        if self.plausible.len() != self.num_queries
            || self.prompt_index.len() != self.num_queries
            || self.support_of_concept.len() != self.num_concepts
            || self.designated_safe.len() != self.num_concepts
            || self.harmful_expl.len() != self.num_explanations
            || self.filler_expl.len() != self.num_explanations
            || self.world_probs.len() != self.prompts.len()
            || self.direct_support.len() != self.prompts.len()
            || self.prompt_dist.len() != self.prompts.len()
        {
            return err("inconsistent table dimensions".into());
        }
        for (pid, &(q, c)) in self.prompts.iter().enumerate() {
            if q >= self.num_queries || c >= self.num_concepts || !self.plausible[q][c] {
                return err(format!("prompt {pid} = ({q},{c}) not plausible"));
            }
            if self.prompt_index[q][c] != Some(pid) {
                return err(format!("prompt index broken at ({q},{c})"));
            }
        }
        for c in 0..self.num_concepts {
            let support = &self.support_of_concept[c];
            if support.is_empty() || support.len() >= self.num_explanations {
                return err(format!("concept {c}: support size must be in [1, |E|)"));
            }
            for &e in support {
                if e >= self.num_explanations || self.filler_expl[e] {
                    return err(format!("concept {c}: bad support explanation {e}"));
                }
            }
            for &e in &self.designated_safe[c] {
                if e >= self.num_explanations
                    || self.harmful_expl[e]
                    || self.filler_expl[e]
                    || support.contains(&e)
                {
                    return err(format!("concept {c}: bad designated safe explanation {e}"));
                }
            }
            if self.concept_sets(c).n() < 2 {
                return err(format!("concept {c}: restricted set smaller than 2"));
            }
            let prompts = self.prompts_of_concept(c);
            if prompts.is_empty() {
                return err(format!("concept {c}: no plausible prompts"));
            }
            if !prompts.iter().any(|&p| self.direct_support[p]) {
                return err(format!("concept {c}: no direct prompts"));
            }
            if !prompts.iter().any(|&p| !self.direct_support[p]) {
                return err(format!("concept {c}: no held-out prompts"));
            }
            // support equality: each row positive exactly on the concept
            // support
            for &pid in &prompts {
                let row = self.world_probs[pid].as_slice();
                for (e, &v) in row.iter().enumerate() {
                    let in_support = support.contains(&e);
                    if in_support && v <= 0.0 {
                        return err(format!("prompt {pid}: zero mass on support element {e}"));
                    }
                    if !in_support && v != 0.0 {
                        return err(format!("prompt {pid}: mass off support at {e}"));
                    }
                }
            }
        }
        for (pid, &d) in self.prompt_dist.as_slice().iter().enumerate() {
            if d > 0.0 && !self.direct_support[pid] {
                return err(format!("prompt_dist mass on held-out prompt {pid}"));
            }
        }
        Ok(())
    }
}

fn sample_subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.random_range(0..n - i);
        idx.swap(i, j);
    }
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

/// Dirichlet(α·1) over `k` coordinates with a floor on the smallest entry
/// so the floating-point support matches the set-level support exactly.
fn dirichlet_row(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Result<Vec<f64>> {
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Construction(format!("bad dirichlet alpha: {e}")))?;
    for _ in 0..1000 {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            continue;
        }
        let row: Vec<f64> = draws.iter().map(|g| g / total).collect();
        if row.iter().all(|&v| v >= 1e-4 / k as f64) {
            return Ok(row);
        }
    }
    Err(Error::Construction(
        "dirichlet row kept landing on the simplex boundary".into(),
    ))
}

/// Builds a world satisfying every [`ToyWorld`] invariant; deterministic in
/// `seed`.
///
/// Harmful-intended concepts receive supports mixing harmful and safe
/// explanations with harmful mass in [1−η, 1) under every plausible query;
/// other concepts draw safe-only supports.
pub fn build_world(cfg: &WorldConfig, seed: u64) -> Result<ToyWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let harmful_set: BTreeSet<ConceptId> = cfg.harmful_concepts.iter().copied().collect();

    let e = cfg.num_explanations;
    let h = cfg.num_harmful_explanations;
    let f = cfg.num_filler_explanations;
    let harmful_expl: Vec<bool> = (0..e).map(|i| i < h).collect();
    let filler_expl: Vec<bool> = (0..e).map(|i| i >= e - f).collect();
    let safe_ids: Vec<ExplanationId> = (h..e - f).collect();

    // plausibility
    let shared_queries = if cfg.aligned_queries {
        Some(sample_subset(
            &mut rng,
            cfg.num_queries,
            cfg.plausible_queries_per_concept,
        ))
    } else {
        None
    };
    let mut queries_of: Vec<Vec<QueryId>> = Vec::with_capacity(cfg.num_concepts);
    for _c in 0..cfg.num_concepts {
        let qs = match &shared_queries {
            Some(qs) => qs.clone(),
            None => sample_subset(&mut rng, cfg.num_queries, cfg.plausible_queries_per_concept),
        };
        queries_of.push(qs);
    }
    let mut plausible = vec![vec![false; cfg.num_concepts]; cfg.num_queries];
    for (c, qs) in queries_of.iter().enumerate() {
        for &q in qs {
            plausible[q][c] = true;
        }
    }

    // prompt list ordered by (concept, query)
    let mut prompts = Vec::new();
    let mut prompt_index = vec![vec![None; cfg.num_concepts]; cfg.num_queries];
    for (c, qs) in queries_of.iter().enumerate() {
        for &q in qs {
            prompt_index[q][c] = Some(prompts.len());
            prompts.push((q, c));
        }
    }

    // held-out split per concept
    let mut direct_support = vec![true; prompts.len()];
    for (c, qs) in queries_of.iter().enumerate() {
        let held = sample_subset(&mut rng, qs.len(), cfg.heldout_queries_per_concept);
        for &hi in &held {
            let q = qs[hi];
            direct_support[prompt_index[q][c].unwrap()] = false;
        }
    }

    // supports and designated safe sets
    let mut support_of_concept = Vec::with_capacity(cfg.num_concepts);
    let mut designated_safe = vec![Vec::new(); cfg.num_concepts];
    for c in 0..cfg.num_concepts {
        let mut support: Vec<ExplanationId>;
        if harmful_set.contains(&c) {
            support = sample_subset(&mut rng, h, cfg.harmful_support_count);
            let safe_count = cfg.support_size - cfg.harmful_support_count;
            let extra = sample_subset(
                &mut rng,
                safe_ids.len(),
                safe_count + cfg.designated_safe_count,
            );
            for (i, &si) in extra.iter().enumerate() {
                if i < safe_count {
                    support.push(safe_ids[si]);
                } else {
                    designated_safe[c].push(safe_ids[si]);
                }
            }
            designated_safe[c].sort_unstable();
        } else {
            support = sample_subset(&mut rng, safe_ids.len(), cfg.support_size)
                .into_iter()
                .map(|si| safe_ids[si])
                .collect();
        }
        support.sort_unstable();
        support_of_concept.push(support);
    }

    // ground-truth rows
    let mut world_probs = Vec::with_capacity(prompts.len());
    for &(_q, c) in &prompts {
        let support = &support_of_concept[c];
        let mut row = vec![0.0; e];
        if harmful_set.contains(&c) {
            let harmful_in: Vec<ExplanationId> = support
                .iter()
                .copied()
                .filter(|&e| harmful_expl[e])
                .collect();
            let safe_in: Vec<ExplanationId> = support
                .iter()
                .copied()
                .filter(|&e| !harmful_expl[e])
                .collect();
            if safe_in.is_empty() {
                let part = dirichlet_row(&mut rng, cfg.dirichlet_alpha, harmful_in.len())?;
                for (&e, &v) in harmful_in.iter().zip(&part) {
                    row[e] = v;
                }
            } else {
                // harmful mass in [1-η, 1), bounded away from 1 so safe
                // support entries stay strictly positive
                let u: f64 = rng.random();
                let mu = 1.0 - cfg.eta * (0.01 + 0.99 * u);
                let hp = dirichlet_row(&mut rng, cfg.dirichlet_alpha, harmful_in.len())?;
                let sp = dirichlet_row(&mut rng, cfg.dirichlet_alpha, safe_in.len())?;
                for (&e, &v) in harmful_in.iter().zip(&hp) {
                    row[e] = mu * v;
                }
                for (&e, &v) in safe_in.iter().zip(&sp) {
                    row[e] = (1.0 - mu) * v;
                }
            }
        } else {
            let part = dirichlet_row(&mut rng, cfg.dirichlet_alpha, support.len())?;
            for (&e, &v) in support.iter().zip(&part) {
                row[e] = v;
            }
        }
        world_probs.push(Dist::new(row)?);
    }

    // prompt distribution on the direct prompts
    let weights: Vec<f64> = direct_support
        .iter()
        .map(|&d| if d { 0.5 + rng.random::<f64>() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let prompt_dist = Dist::new(weights.into_iter().map(|w| w / total).collect())?;

    let world = ToyWorld {
        num_queries: cfg.num_queries,
        num_concepts: cfg.num_concepts,
        num_explanations: e,
        eta: cfg.eta,
        harmful_expl,
        filler_expl,
        plausible,
        prompts,
        prompt_index,
        support_of_concept,
        designated_safe,
        world_probs,
        direct_support,
        prompt_dist,
    };
    world.validate()?;
    Ok(world)
}

/// Concepts whose minimum harmful support mass over plausible queries is
/// ≥ 1 − eta.
pub fn harmful_concepts_at(world: &ToyWorld, eta: f64) -> Vec<ConceptId> {
    (0..world.num_concepts)
        .filter(|&c| world.min_harmful_mass(c) >= 1.0 - eta)
        .collect()
}

/// Harmful labeling at the world's η, together with the per-concept
/// explanation sets.
pub fn label_harmful_concepts(world: &ToyWorld) -> HarmfulLabeling {
    HarmfulLabeling {
        harmful: harmful_concepts_at(world, world.eta),
        sets: (0..world.num_concepts)
            .map(|c| world.concept_sets(c))
            .collect(),
    }
}

/// Prompt-distribution mass on harmful-concept prompts (the mixture weight
/// α; the complement is the safe component's weight).
pub fn mixture_alpha(world: &ToyWorld) -> f64 {
    let harmful: BTreeSet<ConceptId> = harmful_concepts_at(world, world.eta).into_iter().collect();
    let mut acc = KahanSum::new();
    for (pid, &w) in world.prompt_dist.as_slice().iter().enumerate() {
        if harmful.contains(&world.concept_of(pid)) {
            acc.add(w);
        }
    }
    acc.value()
}

/// A sampled pretraining corpus: i.i.d. prompts from the prompt
/// distribution, each paired with an explanation drawn from the world row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub samples: Vec<(PromptId, ExplanationId)>,
    pub seed: u64,
}

/// Inverse-CDF sampler over a fixed categorical distribution.
pub(crate) struct CategoricalSampler {
    cumulative: Vec<f64>,
}

impl CategoricalSampler {
    pub fn new(probs: &[f64]) -> Self {
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in probs {
            acc += p;
            cumulative.push(acc);
        }
        Self { cumulative }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u: f64 = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}

pub fn sample_corpus(world: &ToyWorld, n: usize, seed: u64) -> Result<Corpus> {
    if n < 1 {
        return Err(Error::Domain("corpus size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt_sampler = CategoricalSampler::new(world.prompt_dist.as_slice());
    let row_samplers: Vec<CategoricalSampler> = (0..world.num_prompts())
        .map(|pid| CategoricalSampler::new(world.world_probs[pid].as_slice()))
        .collect();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let pid = prompt_sampler.sample(&mut rng);
        let e = row_samplers[pid].sample(&mut rng);
        samples.push((pid, e));
    }
    Ok(Corpus { samples, seed })
}

/// A per-prompt logit table inducing softmax output distributions at
/// temperature 1. `mask` marks structural zeros and is admitted for
/// reference models only; training entry points reject masked tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLM {
    num_prompts: usize,
    num_explanations: usize,
    logits: Vec<Vec<f64>>,
    mask: Option<Vec<Vec<bool>>>,
}

impl TabularLM {
    pub fn zeros(num_prompts: usize, num_explanations: usize) -> Self {
        assert!(num_explanations >= 2);
        Self {
            num_prompts,
            num_explanations,
            logits: vec![vec![0.0; num_explanations]; num_prompts],
            mask: None,
        }
    }

    /// Gaussian-initialized logits, deterministic in `seed`.
    pub fn random(num_prompts: usize, num_explanations: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..num_prompts)
            .map(|_| {
                (0..num_explanations)
                    .map(|_| {
                        scale
                            * <StandardNormal as Distribution<f64>>::sample(
                                &StandardNormal,
                                &mut rng,
                            )
                    })
                    .collect()
            })
            .collect();
        Self {
            num_prompts,
            num_explanations,
            logits,
            mask: None,
        }
    }

    pub fn from_logits(logits: Vec<Vec<f64>>) -> Result<Self> {
        Self::with_mask(logits, None)
    }

    /// Reference-model constructor admitting structural zeros.
    pub fn with_mask(logits: Vec<Vec<f64>>, mask: Option<Vec<Vec<bool>>>) -> Result<Self> {
        let num_prompts = logits.len();
        let num_explanations = logits.first().map_or(0, Vec::len);
        if num_explanations < 2 {
            return Err(Error::Domain("LM rows need at least 2 explanations".into()));
        }
        for row in &logits {
            if row.len() != num_explanations {
                return Err(Error::Domain("ragged logit rows".into()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("non-finite logit".into()));
            }
        }
        if let Some(m) = &mask {
            if m.len() != num_prompts || m.iter().any(|r| r.len() != num_explanations) {
                return Err(Error::Domain("mask shape mismatch".into()));
            }
            if m.iter().any(|r| r.iter().all(|&keep| !keep)) {
                return Err(Error::Domain("mask erases an entire row".into()));
            }
        }
        Ok(Self {
            num_prompts,
            num_explanations,
            logits,
            mask,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn num_explanations(&self) -> usize {
        self.num_explanations
    }

    pub fn is_masked(&self) -> bool {
        self.mask.is_some()
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    /// Mutable logit table; callers must keep entries finite.
    pub fn logits_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.logits
    }

    fn row_allowed(&self, pid: PromptId, e: ExplanationId) -> bool {
        self.mask.as_ref().is_none_or(|m| m[pid][e])
    }

    /// Softmax row as a plain vector (masked entries exactly zero).
    pub fn row_probs(&self, pid: PromptId) -> Result<Vec<f64>> {
        if pid >= self.num_prompts {
            return Err(Error::Domain(format!("prompt {pid} out of range")));
        }
        let row = &self.logits[pid];
        let mut max = f64::NEG_INFINITY;
        for (e, &l) in row.iter().enumerate() {
            if self.row_allowed(pid, e) {
                max = max.max(l);
            }
        }
        let mut out = vec![0.0; row.len()];
        let mut total = 0.0;
        for (e, &l) in row.iter().enumerate() {
            if self.row_allowed(pid, e) {
                let v = (l - max).exp();
                out[e] = v;
                total += v;
            }
        }
        for v in &mut out {
            *v /= total;
        }
        Ok(out)
    }

    /// ln p(e | prompt); −∞ on masked entries.
    pub fn log_prob(&self, pid: PromptId, e: ExplanationId) -> Result<f64> {
        if pid >= self.num_prompts || e >= self.num_explanations {
            return Err(Error::Domain(format!(
                "bad (prompt, explanation) = ({pid}, {e})"
            )));
        }
        if !self.row_allowed(pid, e) {
            return Ok(f64::NEG_INFINITY);
        }
        let row = &self.logits[pid];
        let mut max = f64::NEG_INFINITY;
        for (j, &l) in row.iter().enumerate() {
            if self.row_allowed(pid, j) {
                max = max.max(l);
            }
        }
        let mut total = 0.0;
        for (j, &l) in row.iter().enumerate() {
            if self.row_allowed(pid, j) {
                total += (l - max).exp();
            }
        }
        Ok(row[e] - max - total.ln())
    }
}

/// Full softmax output distribution of the LM at a plausible prompt.
pub fn lm_output(lm: &TabularLM, world: &ToyWorld, pid: PromptId) -> Result<Dist> {
    if pid >= world.num_prompts() || lm.num_prompts() != world.num_prompts() {
        return Err(Error::Domain(format!(
            "prompt {pid} out of range for this world/LM"
        )));
    }
    Dist::new(lm.row_probs(pid)?)
}

/// Restriction of a full-length probability row to a concept's output
/// simplex (E_h ∪ E_s ∪ E_n in the fixed order), renormalized. Returns the
/// restricted point and the index map back into explanation ids.
pub fn restrict_row(
    world: &ToyWorld,
    row: &[f64],
    c: ConceptId,
) -> Result<(Dist, Vec<ExplanationId>)> {
    if row.len() != world.num_explanations {
        return Err(Error::DimensionMismatch {
            left: row.len(),
            right: world.num_explanations,
        });
    }
    let index_map = world.concept_sets(c).restricted();
    let mut restricted: Vec<f64> = index_map.iter().map(|&e| row[e]).collect();
    let total: f64 = restricted.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Support(format!(
            "no mass on the restricted set of concept {c}"
        )));
    }
    for v in &mut restricted {
        *v /= total;
    }
    Ok((Dist::new(restricted)?, index_map))
}

/// The LM's point on the concept's output simplex for a plausible prompt.
pub fn lm_restricted_output(
    lm: &TabularLM,
    world: &ToyWorld,
    pid: PromptId,
) -> Result<(Dist, Vec<ExplanationId>)> {
    if pid >= world.num_prompts() {
        return Err(Error::Domain(format!("prompt {pid} out of range")));
    }
    let probs = lm.row_probs(pid)?;
    restrict_row(world, &probs, world.concept_of(pid))
}

/// Gradient-descent hyperparameters for [`pretrain`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PretrainHyper {
    pub learning_rate: f64,
    pub steps: usize,
}

/// Cross-entropy pretraining on a sampled corpus with the analytic
/// softmax-minus-indicator gradient. Returns the trained LM and the loss
/// trace (entry 0 is the initial loss; length = steps + 1).
pub fn pretrain(
    lm: &TabularLM,
    corpus: &Corpus,
    hyper: &PretrainHyper,
) -> Result<(TabularLM, Vec<f64>)> {
    if corpus.samples.is_empty() {
        return Err(Error::Domain("corpus is empty".into()));
    }
    if lm.is_masked() {
        return Err(Error::Support(
            "cannot pretrain a masked reference model".into(),
        ));
    }
    let p = lm.num_prompts();
    let e = lm.num_explanations();
    let mut counts = vec![vec![0.0f64; e]; p];
    let mut visits = vec![0.0f64; p];
    for &(pid, eid) in &corpus.samples {
        if pid >= p || eid >= e {
            return Err(Error::Domain(format!(
                "corpus sample ({pid}, {eid}) out of range"
            )));
        }
        counts[pid][eid] += 1.0;
        visits[pid] += 1.0;
    }
    let total = corpus.samples.len() as f64;
    let visited: Vec<PromptId> = (0..p).filter(|&i| visits[i] > 0.0).collect();

    let mut model = lm.clone();
    let mut trace = Vec::with_capacity(hyper.steps + 1);
    for step in 0..=hyper.steps {
        let mut loss = KahanSum::new();
        let mut grads: Vec<(PromptId, Vec<f64>)> = Vec::with_capacity(visited.len());
        for &pid in &visited {
            let probs = model.row_probs(pid)?;
            let w = visits[pid] / total;
            let mut grad = vec![0.0; e];
            for j in 0..e {
                let c = counts[pid][j];
                if c > 0.0 {
                    loss.add(-(c / total) * probs[j].ln());
                }
                grad[j] = w * (probs[j] - counts[pid][j] / visits[pid]);
            }
            grads.push((pid, grad));
        }
        let loss = loss.value();
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "non-finite pretraining loss at step {step}; last losses: {:?}",
                trace.iter().rev().take(5).collect::<Vec<_>>()
            )));
        }
        trace.push(loss);
        if step == hyper.steps {
            break;
        }
        for (pid, grad) in grads {
            let row = &mut model.logits_mut()[pid];
            for (l, g) in row.iter_mut().zip(&grad) {
                *l -= hyper.learning_rate * g;
            }
        }
    }
    Ok((model, trace))
}

// ---------------------------------------------------------------------------
// Versioned JSON snapshots
// ---------------------------------------------------------------------------

const WORLD_FORMAT: &str = "aligngeom-world";
const LM_FORMAT: &str = "aligngeom-lm";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WorldDoc {
    format: String,
    version: u32,
    num_queries: usize,
    num_concepts: usize,
    num_explanations: usize,
    eta: f64,
    harmful_explanations: Vec<bool>,
    filler_explanations: Vec<bool>,
    prompts: Vec<(QueryId, ConceptId)>,
    support_of_concept: Vec<Vec<ExplanationId>>,
    designated_safe: Vec<Vec<ExplanationId>>,
    world_probs: Vec<Vec<f64>>,
    direct_support: Vec<bool>,
    prompt_dist: Vec<f64>,
}

/// Serialize a world to the versioned JSON snapshot (floats at 12
/// significant digits; byte-stable across round trips).
pub fn world_to_json(world: &ToyWorld) -> Result<String> {
    let doc = WorldDoc {
        format: WORLD_FORMAT.into(),
        version: SNAPSHOT_VERSION,
        num_queries: world.num_queries,
        num_concepts: world.num_concepts,
        num_explanations: world.num_explanations,
        eta: world.eta,
        harmful_explanations: world.harmful_expl.clone(),
        filler_explanations: world.filler_expl.clone(),
        prompts: world.prompts.clone(),
        support_of_concept: world.support_of_concept.clone(),
        designated_safe: world.designated_safe.clone(),
        world_probs: world
            .world_probs
            .iter()
            .map(|d| d.as_slice().to_vec())
            .collect(),
        direct_support: world.direct_support.clone(),
        prompt_dist: world.prompt_dist.as_slice().to_vec(),
    };
    jsonfmt::to_json_string(&doc)
}

pub fn world_from_json(text: &str) -> Result<ToyWorld> {
    let doc: WorldDoc = serde_json::from_str(text)?;
    if doc.format != WORLD_FORMAT || doc.version != SNAPSHOT_VERSION {
        return Err(Error::Construction(format!(
            "unsupported world snapshot {}/{}",
            doc.format, doc.version
        )));
    }
    let mut plausible = vec![vec![false; doc.num_concepts]; doc.num_queries];
    let mut prompt_index = vec![vec![None; doc.num_concepts]; doc.num_queries];
    for (pid, &(q, c)) in doc.prompts.iter().enumerate() {
        if q >= doc.num_queries || c >= doc.num_concepts {
            return Err(Error::Construction(format!(
                "prompt ({q},{c}) out of range"
            )));
        }
        plausible[q][c] = true;
        prompt_index[q][c] = Some(pid);
    }
    let world = ToyWorld {
        num_queries: doc.num_queries,
        num_concepts: doc.num_concepts,
        num_explanations: doc.num_explanations,
        eta: doc.eta,
        harmful_expl: doc.harmful_explanations,
        filler_expl: doc.filler_explanations,
        plausible,
        prompts: doc.prompts,
        prompt_index,
        support_of_concept: doc.support_of_concept,
        designated_safe: doc.designated_safe,
        world_probs: doc
            .world_probs
            .into_iter()
            .map(Dist::new)
            .collect::<Result<Vec<_>>>()?,
        direct_support: doc.direct_support,
        prompt_dist: Dist::new(doc.prompt_dist)?,
    };
    world.validate()?;
    Ok(world)
}

#[derive(Serialize, Deserialize)]
struct LmDoc {
    format: String,
    version: u32,
    num_prompts: usize,
    num_explanations: usize,
    logits: Vec<Vec<f64>>,
    mask: Option<Vec<Vec<bool>>>,
}

pub fn lm_to_json(lm: &TabularLM) -> Result<String> {
    let doc = LmDoc {
        format: LM_FORMAT.into(),
        version: SNAPSHOT_VERSION,
        num_prompts: lm.num_prompts,
        num_explanations: lm.num_explanations,
        logits: lm.logits.clone(),
        mask: lm.mask.clone(),
    };
    jsonfmt::to_json_string(&doc)
}

pub fn lm_from_json(text: &str) -> Result<TabularLM> {
    let doc: LmDoc = serde_json::from_str(text)?;
    if doc.format != LM_FORMAT || doc.version != SNAPSHOT_VERSION {
        return Err(Error::Construction(format!(
            "unsupported LM snapshot {}/{}",
            doc.format, doc.version
        )));
    }
    let lm = TabularLM::with_mask(doc.logits, doc.mask)?;
    if lm.num_prompts != doc.num_prompts || lm.num_explanations != doc.num_explanations {
        return Err(Error::Construction(
            "LM snapshot header disagrees with table".into(),
        ));
    }
    Ok(lm)
}


#[cfg(test)]
mod tests {
    use super::test_worlds::{small_config, small_world};
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn build_is_deterministic_and_valid() {
        let w1 = small_world(7);
        let w2 = small_world(7);
        assert_eq!(w1, w2);
        let w3 = small_world(8);
        assert_ne!(w1, w3);
        w1.validate().unwrap();
    }

    #[test]
    fn support_equality_across_queries() {
        let cfg = WorldConfig {
            harmful_concepts: vec![1],
            aligned_queries: false,
            ..small_config()
        };
        let w = build_world(&cfg, 3).unwrap();
        for c in 0..w.num_concepts {
            let support: BTreeSet<_> = w.support_of_concept(c).iter().copied().collect();
            for pid in w.prompts_of_concept(c) {
                let row_support: BTreeSet<_> =
                    w.world_row(pid).unwrap().support().into_iter().collect();
                assert_eq!(row_support, support, "concept {c} prompt {pid}");
            }
        }
    }

    #[test]
    fn harmful_intent_realized_and_labeled() {
        for seed in 0..5 {
            let w = small_world(seed);
            assert!(w.min_harmful_mass(0) >= 1.0 - w.eta);
            let labeling = label_harmful_concepts(&w);
            assert_eq!(labeling.harmful, vec![0]);
            // safe-only concepts have zero harmful support mass
            assert_eq!(w.min_harmful_mass(1), 0.0);
        }
    }

    #[test]
    fn degenerate_threshold_labels_everything() {
        let w = small_world(11);
        // at the world's own eta only the built harmful concept qualifies
        assert_eq!(harmful_concepts_at(&w, w.eta), vec![0]);
        // eta = 1 → threshold 0 → every concept harmful
        assert_eq!(harmful_concepts_at(&w, 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn mixture_alpha_bounds_and_hand_value() {
        let w = small_world(5);
        let alpha = mixture_alpha(&w);
        assert!((0.0..=1.0).contains(&alpha));
        let mut want = 0.0;
        for pid in w.direct_prompts_of_concept(0) {
            want += w.prompt_dist().get(pid);
        }
        assert_abs_diff_eq!(alpha, want, epsilon = 1e-15);
        assert!(alpha > 0.0);
    }

    #[test]
    fn heldout_prompts_exist_and_carry_no_mass() {
        let w = small_world(2);
        for c in 0..w.num_concepts {
            assert!(!w.heldout_queries_of_concept(c).is_empty());
        }
        for pid in 0..w.num_prompts() {
            if !w.is_direct(pid) {
                assert_eq!(w.prompt_dist().get(pid), 0.0);
            }
        }
    }

    #[test]
    fn corpus_sampling_respects_world_structure() {
        let w = small_world(9);
        let corpus = sample_corpus(&w, 20_000, 21).unwrap();
        assert_eq!(corpus, sample_corpus(&w, 20_000, 21).unwrap());
        let mut freq = vec![0.0; w.num_prompts()];
        for &(pid, e) in &corpus.samples {
            assert!(w.is_direct(pid));
            assert!(w.support_of_concept(w.concept_of(pid)).contains(&e));
            freq[pid] += 1.0;
        }
        // empirical prompt frequencies within 4σ
        let n = corpus.samples.len() as f64;
        for pid in 0..w.num_prompts() {
            let p = w.prompt_dist().get(pid);
            let se = (p * (1.0 - p) / n).sqrt();
            assert!(
                (freq[pid] / n - p).abs() <= 4.0 * se + 1e-9,
                "prompt {pid}: {} vs {p}",
                freq[pid] / n
            );
        }
    }

    #[test]
    fn pretrain_converges_on_point_mass_world() {
        // single-explanation supports make every world row a point mass
        let cfg = WorldConfig {
            num_explanations: 6,
            num_harmful_explanations: 2,
            num_filler_explanations: 1,
            support_size: 1,
            harmful_support_count: 1,
            designated_safe_count: 1,
            ..small_config()
        };
        let w = build_world(&cfg, 13).unwrap();
        let corpus = sample_corpus(&w, 4000, 14).unwrap();
        let lm0 = TabularLM::zeros(w.num_prompts(), w.num_explanations);
        let (lm, trace) = pretrain(
            &lm0,
            &corpus,
            &PretrainHyper {
                learning_rate: 0.5,
                steps: 3000,
            },
        )
        .unwrap();
        assert_eq!(trace.len(), 3001);
        for pid in 0..w.num_prompts() {
            if !w.is_direct(pid) {
                continue;
            }
            let out = lm_output(&lm, &w, pid).unwrap();
            let t = crate::probkit::tv(&out, w.world_row(pid).unwrap()).unwrap();
            assert!(t <= 0.01, "prompt {pid}: tv = {t}");
        }
    }

    #[test]
    fn pretrain_trace_monotone_and_zero_steps_identity() {
        let w = small_world(17);
        let corpus = sample_corpus(&w, 2000, 18).unwrap();
        let lm0 = TabularLM::random(w.num_prompts(), w.num_explanations, 0.3, 19);
        let (same, trace0) = pretrain(
            &lm0,
            &corpus,
            &PretrainHyper {
                learning_rate: 0.1,
                steps: 0,
            },
        )
        .unwrap();
        assert_eq!(same, lm0);
        assert_eq!(trace0.len(), 1);

        let (_lm, trace) = pretrain(
            &lm0,
            &corpus,
            &PretrainHyper {
                learning_rate: 0.1,
                steps: 400,
            },
        )
        .unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn pretraining_reduces_empirical_tv_risk() {
        let w = small_world(29);
        let corpus = sample_corpus(&w, 8000, 30).unwrap();
        let lm0 = TabularLM::random(w.num_prompts(), w.num_explanations, 0.8, 31);
        let (trained, _) = pretrain(
            &lm0,
            &corpus,
            &PretrainHyper {
                learning_rate: 0.5,
                steps: 1500,
            },
        )
        .unwrap();
        let prompts: Vec<PromptId> = (0..w.num_prompts()).filter(|&p| w.is_direct(p)).collect();
        let before = crate::pacbound::tv_empirical_risk(&lm0, &w, &prompts).unwrap();
        let after = crate::pacbound::tv_empirical_risk(&trained, &w, &prompts).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn restricted_output_consistency() {
        let w = small_world(23);
        let lm = TabularLM::zeros(w.num_prompts(), w.num_explanations);
        let pid = w.direct_prompts_of_concept(0)[0];
        // uniform logits → uniform full row
        let full = lm_output(&lm, &w, pid).unwrap();
        for &v in full.as_slice() {
            assert_abs_diff_eq!(v, 1.0 / w.num_explanations as f64, epsilon = 1e-15);
        }
        // restriction of a uniform row is uniform on the restricted set
        let (restricted, map) = lm_restricted_output(&lm, &w, pid).unwrap();
        let sets = w.concept_sets(0);
        assert_eq!(map.len(), sets.n());
        assert_eq!(&map[..sets.n0()], &sets.e_h[..]);
        for &v in restricted.as_slice() {
            assert_abs_diff_eq!(v, 1.0 / sets.n() as f64, epsilon = 1e-14);
        }
        // a row already supported inside the restricted set keeps its values
        let mut masked_logits = vec![vec![0.0; w.num_explanations]; w.num_prompts()];
        masked_logits[pid][sets.e_h[0]] = 1.0;
        let keep = sets.restricted();
        let mask: Vec<Vec<bool>> = (0..w.num_prompts())
            .map(|_| (0..w.num_explanations).map(|e| keep.contains(&e)).collect())
            .collect();
        let ref_lm = TabularLM::with_mask(masked_logits, Some(mask)).unwrap();
        let full = ref_lm.row_probs(pid).unwrap();
        let (restricted, map) = restrict_row(&w, &full, 0).unwrap();
        for (i, &e) in map.iter().enumerate() {
            assert_abs_diff_eq!(restricted.get(i), full[e], epsilon = 1e-14);
        }
    }

    #[test]
    fn masked_models_rejected_from_training() {
        let w = small_world(3);
        let mask = vec![vec![true; w.num_explanations]; w.num_prompts()];
        let lm = TabularLM::with_mask(
            vec![vec![0.0; w.num_explanations]; w.num_prompts()],
            Some(mask),
        )
        .unwrap();
        let corpus = sample_corpus(&w, 100, 1).unwrap();
        assert!(matches!(
            pretrain(
                &lm,
                &corpus,
                &PretrainHyper {
                    learning_rate: 0.1,
                    steps: 1
                }
            ),
            Err(Error::Support(_))
        ));
    }

    #[test]
    fn unsatisfiable_configs_rejected() {
        let mut cfg = small_config();
        cfg.harmful_support_count = cfg.support_size + 1;
        assert!(build_world(&cfg, 1).is_err());
        let mut cfg = small_config();
        cfg.support_size = cfg.num_explanations;
        assert!(build_world(&cfg, 1).is_err());
        let mut cfg = small_config();
        cfg.harmful_concepts = vec![];
        assert!(build_world(&cfg, 1).is_err());
        let mut cfg = small_config();
        cfg.heldout_queries_per_concept = cfg.plausible_queries_per_concept;
        assert!(build_world(&cfg, 1).is_err());
    }

    #[test]
    fn world_snapshot_round_trip() {
        let w = small_world(31);
        let json = world_to_json(&w).unwrap();
        // serializing the same in-memory world is byte-deterministic
        assert_eq!(json, world_to_json(&w).unwrap());
        let w2 = world_from_json(&json).unwrap();
        assert_eq!(w2.num_prompts(), w.num_prompts());
        assert_eq!(w2.support_of_concept(0), w.support_of_concept(0));
        assert_eq!(w2.prompt(3), w.prompt(3));
        // loaded rows agree with the originals at 12 significant digits
        // (the loading constructor renormalizes, hence the tiny wash)
        for pid in 0..w.num_prompts() {
            let a = w.world_row(pid).unwrap();
            let b = w2.world_row(pid).unwrap();
            assert!(crate::probkit::tv(a, b).unwrap() < 1e-10);
        }

        // logit tables carry no normalization constraint: byte-stable
        let lm = TabularLM::random(w.num_prompts(), w.num_explanations, 1.0, 5);
        let lj = lm_to_json(&lm).unwrap();
        let lm2 = lm_from_json(&lj).unwrap();
        assert_eq!(lj, lm_to_json(&lm2).unwrap());
    }

    #[test]
    fn snapshot_rejects_tampered_documents() {
        let w = small_world(1);
        let json = world_to_json(&w).unwrap();
        let bad = json.replace("\"aligngeom-world\"", "\"other\"");
        assert!(world_from_json(&bad).is_err());
        // corrupt a probability so a row stops summing to 1
        let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        doc["world_probs"][0][0] = serde_json::json!(0.5);
        let text = serde_json::to_string(&doc).unwrap();
        assert!(world_from_json(&text).is_err());
    }
}
