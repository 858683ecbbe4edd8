//! RLHF / E-RLHF objectives on tabular models.
//!
//! The KL-regularized fine-tuning objective has the closed-form optimum
//! p*(e|x) ∝ p_ref(e|x) exp(r(x,e)/β); the safety-transformed variant
//! anchors the reference row at a transformed prompt x_s instead, which
//! erases reference-support harmful explanations and adds the transformed
//! row's safe ones. The direct preference losses
//! −log σ(β Δ log-ratio) are provided in sampled and exact-expectation
//! (Bradley–Terry-weighted) forms with analytic gradients, plus plain
//! gradient-descent training, the support proposition check and the
//! context-distillation loss.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kahan::KahanSum;
use crate::probkit::Dist;
use crate::toyworld::{
    harmful_concepts_at, ConceptId, ExplanationId, PromptId, TabularLM, ToyWorld,
};

/// KL coefficient and optimizer settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErlhfConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

impl ErlhfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Domain(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Domain("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Unnormalized reward over (prompt, explanation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    r: Vec<Vec<f64>>,
}

impl RewardTable {
    pub fn new(r: Vec<Vec<f64>>) -> Result<Self> {
        if r.is_empty() || r[0].is_empty() {
            return Err(Error::Domain("empty reward table".into()));
        }
        let width = r[0].len();
        for row in &r {
            if row.len() != width {
                return Err(Error::Domain("ragged reward table".into()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("non-finite reward".into()));
            }
        }
        Ok(Self { r })
    }

    /// Label-based reward: one value per explanation class, same at every
    /// prompt.
    pub fn from_labels(world: &ToyWorld, safe: f64, harmful: f64, filler: f64) -> Result<Self> {
        let row: Vec<f64> = (0..world.num_explanations)
            .map(|e| {
                if world.is_harmful_explanation(e) {
                    harmful
                } else if world.is_filler_explanation(e) {
                    filler
                } else {
                    safe
                }
            })
            .collect();
        Self::new(vec![row; world.num_prompts()])
    }

    pub fn get(&self, x: PromptId, e: ExplanationId) -> f64 {
        self.r[x][e]
    }

    pub fn num_prompts(&self) -> usize {
        self.r.len()
    }
}

/// One preference observation: prompt, preferred / dispreferred
/// explanations, harmfulness flag, and the safety-transformed prompt
/// (equal to `x` for non-harmful prompts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub x: PromptId,
    pub e_w: ExplanationId,
    pub e_l: ExplanationId,
    pub harmful: bool,
    pub x_s: PromptId,
}

impl PreferenceTriple {
    pub fn validate(&self, world: &ToyWorld) -> Result<()> {
        if self.e_w == self.e_l {
            return Err(Error::Domain("preference pair must be distinct".into()));
        }
        if self.x >= world.num_prompts() || self.x_s >= world.num_prompts() {
            return Err(Error::Domain("triple references an implausible prompt".into()));
        }
        let sets = world.concept_sets(world.concept_of(self.x)).restricted();
        if !sets.contains(&self.e_w) || !sets.contains(&self.e_l) {
            return Err(Error::Domain(
                "preference explanations outside the concept's restricted set".into(),
            ));
        }
        Ok(())
    }
}

/// Concept remap sending each harmful concept to a designated safe one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyMapping {
    map: BTreeMap<ConceptId, ConceptId>,
}

impl SafetyMapping {
    /// Validates the pairing: every harmful concept mapped to a non-harmful
    /// concept whose support adds at least one safe explanation beyond the
    /// harmful concept's support, with all of the harmful concept's
    /// plausible queries staying plausible under the target.
    pub fn new(world: &ToyWorld, pairs: &[(ConceptId, ConceptId)]) -> Result<Self> {
        let harmful = harmful_concepts_at(world, world.eta);
        let mut map = BTreeMap::new();
        for &(from, to) in pairs {
            if map.insert(from, to).is_some() {
                return Err(Error::Mapping(format!("concept {from} mapped twice")));
            }
        }
        for &c in &harmful {
            let Some(&to) = map.get(&c) else {
                return Err(Error::Mapping(format!("harmful concept {c} is unmapped")));
            };
            if to >= world.num_concepts || harmful.contains(&to) {
                return Err(Error::Mapping(format!("target concept {to} is not safe")));
            }
            let from_support = world.support_of_concept(c);
            let adds_safe = world
                .support_of_concept(to)
                .iter()
                .any(|&e| world.is_safe_explanation(e) && !from_support.contains(&e));
            if !adds_safe {
                return Err(Error::Mapping(format!(
                    "target {to} adds no safe explanation beyond concept {c}'s support"
                )));
            }
            for pid in world.prompts_of_concept(c) {
                let (q, _) = world.prompt(pid);
                if !world.is_plausible(q, to) {
                    return Err(Error::Mapping(format!(
                        "query {q} of concept {c} is implausible with target {to}"
                    )));
                }
            }
        }
        Ok(Self { map })
    }

    pub fn target(&self, c: ConceptId) -> Option<ConceptId> {
        self.map.get(&c).copied()
    }
}

/// Safety transformation: harmful-concept prompts get their concept
/// swapped per the mapping; everything else is returned unchanged.
pub fn safety_transform(world: &ToyWorld, mapping: &SafetyMapping, pid: PromptId) -> Result<PromptId> {
    if pid >= world.num_prompts() {
        return Err(Error::Domain(format!("prompt {pid} out of range")));
    }
    let (q, c) = world.prompt(pid);
    if !harmful_concepts_at(world, world.eta).contains(&c) {
        return Ok(pid);
    }
    let to = mapping
        .target(c)
        .ok_or_else(|| Error::Mapping(format!("harmful concept {c} is unmapped")))?;
    world
        .prompt_id(q, to)
        .ok_or_else(|| Error::Mapping(format!("transformed prompt ({q},{to}) implausible")))
}

/// Closed-form optimum of the KL-regularized fine-tuning objective with
/// the reference anchored at `x_ref`: p*(e|x) ∝ p_ref(e|x_ref)·exp(r(x,e)/β).
/// Structural zeros of the reference row stay exactly zero.
fn tilted_reference(
    reference: &TabularLM,
    reward: &RewardTable,
    beta: f64,
    x: PromptId,
    x_ref: PromptId,
) -> Result<Dist> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta must be positive, got {beta}")));
    }
    let ref_row = reference.row_probs(x_ref)?;
    if reward.num_prompts() <= x {
        return Err(Error::Domain(format!("reward table lacks prompt {x}")));
    }
    let mut weights: Vec<f64> = Vec::with_capacity(ref_row.len());
    let mut max = f64::NEG_INFINITY;
    for (e, &p) in ref_row.iter().enumerate() {
        if p > 0.0 {
            let w = p.ln() + reward.get(x, e) / beta;
            max = max.max(w);
            weights.push(w);
        } else {
            weights.push(f64::NEG_INFINITY);
        }
    }
    if !max.is_finite() {
        return Err(Error::Domain("reference row carries no mass".into()));
    }
    let mut total = 0.0;
    let mut probs = vec![0.0; weights.len()];
    for (e, &w) in weights.iter().enumerate() {
        if w > f64::NEG_INFINITY {
            let v = (w - max).exp();
            probs[e] = v;
            total += v;
        }
    }
    for v in &mut probs {
        *v /= total;
    }
    Dist::new(probs)
}

/// p*_RLFT(e|x) ∝ p_ref(e|x) exp(r(x,e)/β).
pub fn rlhf_optimum(
    reference: &TabularLM,
    reward: &RewardTable,
    beta: f64,
    x: PromptId,
) -> Result<Dist> {
    tilted_reference(reference, reward, beta, x, x)
}

/// p*(e|x) ∝ p_ref(e|x_s) exp(r(x,e)/β) — the safety-anchored optimum.
pub fn erlhf_optimum(
    reference: &TabularLM,
    reward: &RewardTable,
    beta: f64,
    x: PromptId,
    x_s: PromptId,
) -> Result<Dist> {
    tilted_reference(reference, reward, beta, x, x_s)
}

/// Numerically stable −ln σ(z) = softplus(−z).
fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Which prompt anchors the reference row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DpoVariant {
    /// Reference at the original prompt x.
    Dpo,
    /// Reference at the safety-transformed prompt x_s.
    Edpo,
}

fn triple_ref_prompt(variant: DpoVariant, t: &PreferenceTriple) -> PromptId {
    match variant {
        DpoVariant::Dpo => t.x,
        DpoVariant::Edpo => t.x_s,
    }
}

/// The sigmoid argument β[(ln π(e_w|x) − ln ref(e_w|x_r)) − (ln π(e_l|x) −
/// ln ref(e_l|x_r))]; errors identify triples touching reference zeros.
fn triple_margin(
    policy: &TabularLM,
    reference: &TabularLM,
    beta: f64,
    idx: usize,
    t: &PreferenceTriple,
    x_ref: PromptId,
) -> Result<f64> {
    let lp_w = policy.log_prob(t.x, t.e_w)?;
    let lp_l = policy.log_prob(t.x, t.e_l)?;
    let lr_w = reference.log_prob(x_ref, t.e_w)?;
    let lr_l = reference.log_prob(x_ref, t.e_l)?;
    for (tag, v) in [("policy", lp_w), ("policy", lp_l), ("reference", lr_w), ("reference", lr_l)]
    {
        if v == f64::NEG_INFINITY {
            return Err(Error::Support(format!(
                "triple {idx} (x={}, e_w={}, e_l={}) hits a zero-probability {tag} entry",
                t.x, t.e_w, t.e_l
            )));
        }
    }
    Ok(beta * ((lp_w - lr_w) - (lp_l - lr_l)))
}

fn preference_loss(
    policy: &TabularLM,
    reference: &TabularLM,
    data: &[PreferenceTriple],
    beta: f64,
    variant: DpoVariant,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Domain("empty preference dataset".into()));
    }
    let mut acc = KahanSum::new();
    for (i, t) in data.iter().enumerate() {
        let z = triple_margin(policy, reference, beta, i, t, triple_ref_prompt(variant, t))?;
        acc.add(neg_log_sigmoid(z));
    }
    Ok(acc.value() / data.len() as f64)
}

/// Mean −ln σ(β Δ log-ratio) with the reference anchored at x.
pub fn dpo_loss(
    policy: &TabularLM,
    reference: &TabularLM,
    data: &[PreferenceTriple],
    beta: f64,
) -> Result<f64> {
    preference_loss(policy, reference, data, beta, DpoVariant::Dpo)
}

/// Mean −ln σ(β Δ log-ratio) with the reference anchored at each triple's
/// x_s. Coincides with [`dpo_loss`] exactly whenever x_s = x throughout.
pub fn edpo_loss(
    policy: &TabularLM,
    reference: &TabularLM,
    data: &[PreferenceTriple],
    beta: f64,
) -> Result<f64> {
    preference_loss(policy, reference, data, beta, DpoVariant::Edpo)
}

/// Exact expectation of the preference loss at prompt pairs (x, x_s):
/// unordered explanation pairs from the concept's restricted set, each
/// orientation weighted by its Bradley–Terry probability
/// σ(r(x, e_w) − r(x, e_l)).
pub fn expected_preference_loss(
    policy: &TabularLM,
    reference: &TabularLM,
    bt_reward: &RewardTable,
    beta: f64,
    world: &ToyWorld,
    prompt_pairs: &[(PromptId, PromptId)],
) -> Result<f64> {
    let (loss, _) =
        expected_loss_and_grad(policy, reference, bt_reward, beta, world, prompt_pairs, false)?;
    Ok(loss)
}

/// Expected DPO loss (x_s = x for every prompt).
pub fn expected_dpo_loss(
    policy: &TabularLM,
    reference: &TabularLM,
    bt_reward: &RewardTable,
    beta: f64,
    world: &ToyWorld,
    prompts: &[PromptId],
) -> Result<f64> {
    let pairs: Vec<(PromptId, PromptId)> = prompts.iter().map(|&x| (x, x)).collect();
    expected_preference_loss(policy, reference, bt_reward, beta, world, &pairs)
}

type GradTable = BTreeMap<PromptId, Vec<f64>>;

/// Loss and (optionally) the gradient with respect to the policy logits.
/// The loss depends on logits only through within-row differences, so the
/// log-softmax normalizer cancels and gradients touch only the explanations
/// appearing in pairs.
fn expected_loss_and_grad(
    policy: &TabularLM,
    reference: &TabularLM,
    bt_reward: &RewardTable,
    beta: f64,
    world: &ToyWorld,
    prompt_pairs: &[(PromptId, PromptId)],
    with_grad: bool,
) -> Result<(f64, GradTable)> {
    if prompt_pairs.is_empty() {
        return Err(Error::Domain("no prompts given".into()));
    }
    let mut total = KahanSum::new();
    let mut grads: GradTable = BTreeMap::new();
    for &(x, x_s) in prompt_pairs {
        if x >= world.num_prompts() || x_s >= world.num_prompts() {
            return Err(Error::Domain(format!("prompt pair ({x},{x_s}) out of range")));
        }
        let restricted = world.concept_sets(world.concept_of(x)).restricted();
        let pairs = restricted.len() * (restricted.len() - 1) / 2;
        if pairs == 0 {
            return Err(Error::Domain(format!("prompt {x}: restricted set too small")));
        }
        let scale = 1.0 / (prompt_pairs.len() as f64 * pairs as f64);
        let grad_row = grads.entry(x).or_insert_with(|| vec![0.0; policy.num_explanations()]);
        for (i, &a) in restricted.iter().enumerate() {
            for &b in &restricted[i + 1..] {
                let t = PreferenceTriple { x, e_w: a, e_l: b, harmful: false, x_s };
                let z = triple_margin(policy, reference, beta, 0, &t, x_s)?;
                let w_ab = sigmoid(bt_reward.get(x, a) - bt_reward.get(x, b));
                total.add(scale * (w_ab * neg_log_sigmoid(z) + (1.0 - w_ab) * neg_log_sigmoid(-z)));
                if with_grad {
                    // d/dz [w·sp(−z) + (1−w)·sp(z)] = −w σ(−z) + (1−w) σ(z)
                    let coef = scale * beta * ((1.0 - w_ab) * sigmoid(z) - w_ab * sigmoid(-z));
                    grad_row[a] += coef;
                    grad_row[b] -= coef;
                }
            }
        }
    }
    Ok((total.value(), grads))
}

fn sampled_loss_and_grad(
    policy: &TabularLM,
    reference: &TabularLM,
    data: &[PreferenceTriple],
    beta: f64,
    variant: DpoVariant,
) -> Result<(f64, GradTable)> {
    let mut total = KahanSum::new();
    let mut grads: GradTable = BTreeMap::new();
    let scale = 1.0 / data.len() as f64;
    for (i, t) in data.iter().enumerate() {
        let z = triple_margin(policy, reference, beta, i, t, triple_ref_prompt(variant, t))?;
        total.add(scale * neg_log_sigmoid(z));
        let coef = -scale * beta * sigmoid(-z);
        let grad_row = grads
            .entry(t.x)
            .or_insert_with(|| vec![0.0; policy.num_explanations()]);
        grad_row[t.e_w] += coef;
        grad_row[t.e_l] -= coef;
    }
    Ok((total.value(), grads))
}

/// Training data: sampled triples or the exact Bradley–Terry expectation.
#[derive(Debug, Clone)]
pub enum TrainData<'a> {
    Sampled(&'a [PreferenceTriple]),
    Expected {
        bt_reward: &'a RewardTable,
        world: &'a ToyWorld,
        prompt_pairs: &'a [(PromptId, PromptId)],
    },
}

/// One optimizer step record.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Plain gradient descent on the policy logits. The trace has steps + 1
/// rows; row 0 is the initial state and the last row the final one.
pub fn train_dpo(
    policy_init: &TabularLM,
    reference: &TabularLM,
    data: &TrainData,
    cfg: &ErlhfConfig,
    variant: DpoVariant,
) -> Result<(TabularLM, Vec<TraceRow>)> {
    cfg.validate()?;
    if policy_init.is_masked() {
        return Err(Error::Support("cannot train a masked policy".into()));
    }
    let mut policy = policy_init.clone();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (loss, grads) = match data {
            TrainData::Sampled(triples) => {
                if triples.is_empty() {
                    return Err(Error::Domain("empty preference dataset".into()));
                }
                let triples: &[PreferenceTriple] = triples;
                sampled_loss_and_grad(&policy, reference, triples, cfg.beta, variant)?
            }
            TrainData::Expected { bt_reward, world, prompt_pairs } => {
                let pairs: Vec<(PromptId, PromptId)> = match variant {
                    DpoVariant::Dpo => prompt_pairs.iter().map(|&(x, _)| (x, x)).collect(),
                    DpoVariant::Edpo => prompt_pairs.to_vec(),
                };
                expected_loss_and_grad(&policy, reference, bt_reward, cfg.beta, world, &pairs, true)?
            }
        };
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "non-finite preference loss at step {step}"
            )));
        }
        let grad_norm = grads
            .values()
            .flat_map(|row| row.iter().map(|g| g * g))
            .sum::<f64>()
            .sqrt();
        trace.push(TraceRow { step, loss, grad_norm });
        if step == cfg.steps {
            break;
        }
        for (pid, grad) in &grads {
            let row = &mut policy.logits_mut()[*pid];
            for (l, g) in row.iter_mut().zip(grad) {
                *l -= cfg.learning_rate * g;
            }
        }
    }
    Ok((policy, trace))
}

/// Gradient of the preference loss with respect to every policy logit, as
/// a dense table (zero rows omitted). Exposed for gradient checking.
pub fn loss_gradient(
    policy: &TabularLM,
    reference: &TabularLM,
    data: &TrainData,
    beta: f64,
    variant: DpoVariant,
) -> Result<GradTable> {
    match data {
        TrainData::Sampled(triples) => {
            Ok(sampled_loss_and_grad(policy, reference, triples, beta, variant)?.1)
        }
        TrainData::Expected { bt_reward, world, prompt_pairs } => {
            let pairs: Vec<(PromptId, PromptId)> = match variant {
                DpoVariant::Dpo => prompt_pairs.iter().map(|&(x, _)| (x, x)).collect(),
                DpoVariant::Edpo => prompt_pairs.to_vec(),
            };
            Ok(expected_loss_and_grad(policy, reference, bt_reward, beta, world, &pairs, true)?.1)
        }
    }
}

/// Outcome of the support proposition check at one (x, x_s) pair.
#[derive(Debug, Clone, Serialize)]
pub struct PropositionReport {
    /// supp(ref(·|x)) = supp(ref(·|x_s)): both clause sets empty.
    pub degenerate: bool,
    /// supp(ref(·|x)) − supp(ref(·|x_s)).
    pub erased: Vec<ExplanationId>,
    /// supp(ref(·|x_s)) − supp(ref(·|x)).
    pub added: Vec<ExplanationId>,
    /// p*(e|x) = 0 for every erased e (checked exactly).
    pub erase_clause_holds: bool,
    /// p*(e|x) > 0 for every added e (checked exactly).
    pub add_clause_holds: bool,
    pub pass: bool,
    /// Harmful-zone coordinate (restricted, renormalized) of the plain
    /// optimum at x.
    pub harmful_mass_rlhf: f64,
    /// Same for the safety-anchored optimum.
    pub harmful_mass_erlhf: f64,
}

fn restricted_harmful_mass(world: &ToyWorld, row: &Dist, c: ConceptId) -> Result<f64> {
    let (restricted, _map) = crate::toyworld::restrict_row(world, row.as_slice(), c)?;
    let n0 = world.concept_sets(c).n0();
    let mut acc = KahanSum::new();
    for &v in &restricted.as_slice()[..n0] {
        acc.add(v);
    }
    Ok(acc.value())
}

/// Verifies the erase/add support clauses of the safety-anchored optimum
/// and reports the harmful-zone mass of both optima at the prompt's
/// concept.
pub fn support_proposition_check(
    reference: &TabularLM,
    reward: &RewardTable,
    beta: f64,
    x: PromptId,
    x_s: PromptId,
    world: &ToyWorld,
) -> Result<PropositionReport> {
    let ref_x = reference.row_probs(x)?;
    let ref_xs = reference.row_probs(x_s)?;
    let erased: Vec<ExplanationId> = (0..ref_x.len())
        .filter(|&e| ref_x[e] > 0.0 && ref_xs[e] == 0.0)
        .collect();
    let added: Vec<ExplanationId> = (0..ref_x.len())
        .filter(|&e| ref_xs[e] > 0.0 && ref_x[e] == 0.0)
        .collect();
    let degenerate = erased.is_empty() && added.is_empty();

    let p_rlhf = rlhf_optimum(reference, reward, beta, x)?;
    let p_erlhf = erlhf_optimum(reference, reward, beta, x, x_s)?;
    let erase_clause_holds = erased.iter().all(|&e| p_erlhf.get(e) == 0.0);
    let add_clause_holds = added.iter().all(|&e| p_erlhf.get(e) > 0.0);

    let c = world.concept_of(x);
    Ok(PropositionReport {
        degenerate,
        erase_clause_holds,
        add_clause_holds,
        pass: !degenerate && erase_clause_holds && add_clause_holds,
        erased,
        added,
        harmful_mass_rlhf: restricted_harmful_mass(world, &p_rlhf, c)?,
        harmful_mass_erlhf: restricted_harmful_mass(world, &p_erlhf, c)?,
    })
}

/// Mean KL(teacher(·|prefixed x) ‖ student(·|x)) over (x, prefixed x)
/// pairs.
pub fn context_distill_loss(
    teacher: &TabularLM,
    student: &TabularLM,
    pairs: &[(PromptId, PromptId)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("no prompt pairs given".into()));
    }
    let mut acc = KahanSum::new();
    for &(x, prefixed) in pairs {
        let t = Dist::new(teacher.row_probs(prefixed)?)?;
        let s = Dist::new(student.row_probs(x)?)?;
        let kl = crate::probkit::kl(&t, &s)?;
        if !kl.is_finite() {
            return Err(Error::Support(format!(
                "teacher mass at prompt {prefixed} escapes the student support at {x}"
            )));
        }
        acc.add(kl);
    }
    Ok(acc.value() / pairs.len() as f64)
}

/// Samples preference triples: prompts uniform over `prompts`, unordered
/// explanation pairs uniform over the concept's restricted set, preference
/// orientation from the Bradley–Terry model on `bt_reward`.
pub fn sample_preferences(
    world: &ToyWorld,
    bt_reward: &RewardTable,
    prompts: &[PromptId],
    mapping: Option<&SafetyMapping>,
    count: usize,
    seed: u64,
) -> Result<Vec<PreferenceTriple>> {
    if prompts.is_empty() || count == 0 {
        return Err(Error::Domain("need prompts and a positive count".into()));
    }
    let harmful = harmful_concepts_at(world, world.eta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let x = prompts[rng.random_range(0..prompts.len())];
        let c = world.concept_of(x);
        let restricted = world.concept_sets(c).restricted();
        let i = rng.random_range(0..restricted.len());
        let j = {
            let mut j = rng.random_range(0..restricted.len() - 1);
            if j >= i {
                j += 1;
            }
            j
        };
        let (a, b) = (restricted[i], restricted[j]);
        let p_a_wins = sigmoid(bt_reward.get(x, a) - bt_reward.get(x, b));
        let (e_w, e_l) = if rng.random::<f64>() < p_a_wins { (a, b) } else { (b, a) };
        let is_harmful = harmful.contains(&c);
        let x_s = match (is_harmful, mapping) {
            (true, Some(m)) => safety_transform(world, m, x)?,
            _ => x,
        };
        let t = PreferenceTriple { x, e_w, e_l, harmful: is_harmful, x_s };
        t.validate(world)?;
        out.push(t);
    }
    Ok(out)
}
