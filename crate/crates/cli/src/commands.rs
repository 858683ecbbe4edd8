//! Command handlers. Every command prints its JSON record to stdout and
//! writes it (plus any CSV tables) under the output directory; outputs are
//! byte-identical for identical (config, seed) pairs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use serde::Serialize;

use aligngeom_core::adversary::{
    jailbreak_experiment_detailed, zone_for_concept, DirichletPosterior,
    JailbreakExperimentReport,
};
use aligngeom_core::erlhf::{
    erlhf_optimum, rlhf_optimum, safety_transform, sample_preferences, train_dpo, DpoVariant,
    ErlhfConfig, RewardTable, SafetyMapping, TrainData,
};
use aligngeom_core::jsonfmt::{csv_f64, to_json_string};
use aligngeom_core::pacbound::{
    atl_estimate, harmful_bound, unique_prompts_estimate, varrho, AtlConfig, PacConfig,
};
use aligngeom_core::probkit::tv;
use aligngeom_core::simplex::{
    a_epsilon, gaussian_a, mc_rvol, rvol_harmful_exact, rvol_harmful_gauss, McEstimate, ZoneSpec,
};
use aligngeom_core::toyworld::{
    build_world, label_harmful_concepts, lm_to_json, mixture_alpha, world_to_json, PromptId,
    TabularLM, ToyWorld, WorldConfig,
};
use aligngeom_core::{Dist, DistanceKind};

use crate::config::{
    load_config, GridAxis, JailbreakSimConfig, NamedPromptSet, PromptSelector, RewardSpec,
    SweepConfig, TrainConfig, TrainMode, ZoneParams,
};

pub const EXIT_CHECK_FAILED: u8 = 1;

fn write_output(out_dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let path = out_dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn emit_json<T: Serialize>(out_dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    let text = to_json_string(value)?;
    print!("{text}");
    write_output(out_dir, name, &text)
}

// ---------------------------------------------------------------------------
// zone
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ZoneRecord {
    n: usize,
    n0: usize,
    p: f64,
    eps: f64,
    dist: DistanceKind,
    rvol_exact: f64,
    rvol_gauss: f64,
    a: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    a_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    a_prime: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc: Option<McEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc_sigma: Option<f64>,
}

fn zone_record(zone: &ZoneSpec, mc: Option<(u64, u64)>) -> anyhow::Result<ZoneRecord> {
    let exact = rvol_harmful_exact(zone);
    let (a_eps, a_prime) = match a_epsilon(zone) {
        Ok(ae) => (Some(ae.a_eps), Some(ae.a_prime)),
        Err(_) => (None, None),
    };
    let mc_est = match mc {
        Some((samples, seed)) => Some(mc_rvol(zone, samples, seed)?),
        None => None,
    };
    let mc_sigma = mc_est.map(|est| {
        let se = (exact * (1.0 - exact) / est.samples as f64).sqrt();
        (est.mean - exact).abs() / se.max(1e-12)
    });
    Ok(ZoneRecord {
        n: zone.n,
        n0: zone.n0,
        p: zone.p,
        eps: zone.eps,
        dist: zone.dist,
        rvol_exact: exact,
        rvol_gauss: rvol_harmful_gauss(zone),
        a: gaussian_a(zone),
        a_eps,
        a_prime,
        mc: mc_est,
        mc_sigma,
    })
}

pub fn cmd_zone(
    params: &ZoneParams,
    mc_samples: Option<u64>,
    seed: u64,
    out_dir: &Path,
) -> anyhow::Result<ExitCode> {
    let zone = ZoneSpec::new(params.n, params.n0, params.p, params.eps, params.dist)?;
    let record = zone_record(&zone, mc_samples.map(|s| (s, seed)))?;
    let oracle_ok = record.mc_sigma.is_none_or(|s| s <= 4.0);
    emit_json(out_dir, "zone.json", &record)?;
    if !oracle_ok {
        eprintln!(
            "monte carlo estimate disagrees with the exact volume beyond 4 sigma ({:.1})",
            record.mc_sigma.unwrap()
        );
        return Ok(ExitCode::from(EXIT_CHECK_FAILED));
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// pac / atl
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PacRecord {
    config: PacConfig,
    varrho: f64,
    non_vacuous: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    empirical: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    harmful_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    harmful_bound_vacuous: Option<bool>,
}

pub fn cmd_pac(
    kl: f64,
    n: f64,
    delta: f64,
    alpha: f64,
    empirical: Option<f64>,
    out_dir: &Path,
) -> anyhow::Result<ExitCode> {
    if !(n >= 1.0 && n.fract() == 0.0 && n <= u64::MAX as f64) {
        bail!("--n must be a positive integer (scientific notation accepted), got {n}");
    }
    let cfg = PacConfig::new(kl, n as u64, delta, alpha)?;
    let rho = varrho(&cfg)?;
    let bound = empirical.map(|e| harmful_bound(e, rho, alpha)).transpose()?;
    let record = PacRecord {
        config: cfg,
        varrho: rho,
        non_vacuous: rho < 1.0,
        empirical,
        harmful_bound: bound.map(|b| b.value),
        harmful_bound_vacuous: bound.map(|b| b.vacuous),
    };
    emit_json(out_dir, "pac.json", &record)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct AtlRecord {
    config: AtlConfig,
    atl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    total_tokens: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unique_prompts: Option<f64>,
}

pub fn cmd_atl(
    s: f64,
    t: f64,
    k0: u64,
    tokens: Option<f64>,
    out_dir: &Path,
) -> anyhow::Result<ExitCode> {
    let cfg = AtlConfig::new(s, t, k0)?;
    let atl = atl_estimate(&cfg)?;
    let unique = tokens.map(|tok| unique_prompts_estimate(tok, atl)).transpose()?;
    let record = AtlRecord {
        config: cfg,
        atl,
        total_tokens: tokens,
        unique_prompts: unique,
    };
    emit_json(out_dir, "atl.json", &record)?;
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// world
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct WorldSummary {
    num_queries: usize,
    num_concepts: usize,
    num_explanations: usize,
    num_prompts: usize,
    num_direct_prompts: usize,
    eta: f64,
    harmful_concepts: Vec<usize>,
    mixture_alpha: f64,
    restricted_sizes: Vec<(usize, usize)>,
}

fn summarize(world: &ToyWorld) -> WorldSummary {
    let labeling = label_harmful_concepts(world);
    WorldSummary {
        num_queries: world.num_queries,
        num_concepts: world.num_concepts,
        num_explanations: world.num_explanations,
        num_prompts: world.num_prompts(),
        num_direct_prompts: (0..world.num_prompts()).filter(|&p| world.is_direct(p)).count(),
        eta: world.eta,
        harmful_concepts: labeling.harmful,
        mixture_alpha: mixture_alpha(world),
        restricted_sizes: labeling.sets.iter().map(|s| (s.n(), s.n0())).collect(),
    }
}

pub fn cmd_world_build(config: &Path, seed: u64, out_dir: &Path) -> anyhow::Result<ExitCode> {
    let cfg: WorldConfig = load_config(config)?;
    let world = build_world(&cfg, seed)?;
    write_output(out_dir, "world.json", &world_to_json(&world)?)?;
    emit_json(out_dir, "world_summary.json", &summarize(&world))?;
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_world_inspect(world_path: &Path, out_dir: &Path) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(world_path)
        .with_context(|| format!("reading {}", world_path.display()))?;
    let world = aligngeom_core::toyworld::world_from_json(&text)?;
    emit_json(out_dir, "world_summary.json", &summarize(&world))?;
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// jailbreak-sim
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct JailbreakRecord {
    config: JailbreakSimConfig,
    seed: u64,
    report: JailbreakExperimentReport,
}

fn run_jailbreak(
    cfg: &JailbreakSimConfig,
    base_dir: &Path,
    seed: u64,
) -> anyhow::Result<(JailbreakExperimentReport, Vec<aligngeom_core::adversary::DrawRecord>)> {
    let world = cfg.world.load(base_dir)?;
    let zone = zone_for_concept(&world, cfg.concept, cfg.p, cfg.eps, cfg.dist)?;
    let posterior = DirichletPosterior::new(cfg.posterior.clone())?;
    Ok(jailbreak_experiment_detailed(
        &world,
        cfg.concept,
        &posterior,
        &zone,
        cfg.mode,
        cfg.draws,
        seed,
    )?)
}

pub fn cmd_jailbreak_sim(config: &Path, seed: u64, out_dir: &Path) -> anyhow::Result<ExitCode> {
    let cfg: JailbreakSimConfig = load_config(config)?;
    let base_dir = config.parent().unwrap_or(Path::new("."));
    let (report, draws) = run_jailbreak(&cfg, base_dir, seed)?;

    let mut csv = String::from("draw,harmful_mass,dist_to_zone,success\n");
    for d in &draws {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            d.draw,
            csv_f64(d.harmful_mass),
            csv_f64(d.dist_to_zone),
            d.success
        );
    }
    write_output(out_dir, "jailbreak_draws.csv", &csv)?;
    let pass = report.pass;
    emit_json(out_dir, "jailbreak_report.json", &JailbreakRecord { config: cfg, seed, report })?;
    if !pass {
        eprintln!("empirical success rate fell below the analytic bound minus 4 sigma");
        return Ok(ExitCode::from(EXIT_CHECK_FAILED));
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn resolve_prompts(world: &ToyWorld, selector: &PromptSelector) -> anyhow::Result<Vec<PromptId>> {
    let prompts = match selector {
        PromptSelector::Explicit(ids) => {
            for &pid in ids {
                if pid >= world.num_prompts() {
                    bail!("prompt id {pid} out of range");
                }
            }
            ids.clone()
        }
        PromptSelector::Named(NamedPromptSet::HarmfulDirect) => {
            let harmful = aligngeom_core::toyworld::harmful_concepts_at(world, world.eta);
            (0..world.num_prompts())
                .filter(|&p| world.is_direct(p) && harmful.contains(&world.concept_of(p)))
                .collect()
        }
        PromptSelector::Named(NamedPromptSet::AllDirect) => {
            (0..world.num_prompts()).filter(|&p| world.is_direct(p)).collect()
        }
    };
    if prompts.is_empty() {
        bail!("the prompt selector matched nothing");
    }
    Ok(prompts)
}

fn resolve_reward(world: &ToyWorld, spec: &RewardSpec) -> anyhow::Result<RewardTable> {
    match (&spec.table, spec.safe, spec.harmful) {
        (Some(table), None, None) => Ok(RewardTable::new(table.clone())?),
        (None, Some(safe), Some(harmful)) => {
            Ok(RewardTable::from_labels(world, safe, harmful, spec.filler)?)
        }
        _ => bail!("reward needs either `table` or both `safe` and `harmful`"),
    }
}

#[derive(Serialize)]
struct TrainReport {
    config: TrainConfig,
    variant: DpoVariant,
    seed: u64,
    final_loss: f64,
    final_grad_norm: f64,
    /// Max TV between trained rows and the closed-form optimum.
    max_tv_to_optimum: f64,
    per_prompt_tv: Vec<(PromptId, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tv_tolerance: Option<f64>,
    pass: bool,
}

pub fn cmd_train(
    variant: DpoVariant,
    config: &Path,
    seed: u64,
    out_dir: &Path,
) -> anyhow::Result<ExitCode> {
    let cfg: TrainConfig = load_config(config)?;
    let base_dir = config.parent().unwrap_or(Path::new("."));
    let world = cfg.world.load(base_dir)?;
    let mapping = SafetyMapping::new(&world, &cfg.mapping)?;
    let reward = resolve_reward(&world, &cfg.reward)?;
    let prompts = resolve_prompts(&world, &cfg.prompts)?;
    let pairs: Vec<(PromptId, PromptId)> = prompts
        .iter()
        .map(|&x| Ok((x, safety_transform(&world, &mapping, x)?)))
        .collect::<aligngeom_core::Result<_>>()?;

    let reference = TabularLM::random(world.num_prompts(), world.num_explanations, 0.5, cfg.reference_seed);
    let policy0 = TabularLM::zeros(world.num_prompts(), world.num_explanations);
    let train_cfg = ErlhfConfig {
        beta: cfg.beta,
        learning_rate: cfg.learning_rate,
        steps: cfg.steps,
    };

    let sampled;
    let data = match &cfg.mode {
        TrainMode::Expected => TrainData::Expected {
            bt_reward: &reward,
            world: &world,
            prompt_pairs: &pairs,
        },
        TrainMode::Sampled { count, sample_seed } => {
            sampled = sample_preferences(&world, &reward, &prompts, Some(&mapping), *count, *sample_seed)?;
            TrainData::Sampled(&sampled)
        }
    };
    let (policy, trace) = train_dpo(&policy0, &reference, &data, &train_cfg, variant)?;

    let mut csv = String::from("step,loss,grad_norm\n");
    for row in &trace {
        let _ = writeln!(csv, "{},{},{}", row.step, csv_f64(row.loss), csv_f64(row.grad_norm));
    }
    write_output(out_dir, "train_trace.csv", &csv)?;

    let mut per_prompt_tv = Vec::new();
    let mut max_tv = 0.0f64;
    for &(x, x_s) in &pairs {
        let target = match variant {
            DpoVariant::Dpo => rlhf_optimum(&reference, &reward, cfg.beta, x)?,
            DpoVariant::Edpo => erlhf_optimum(&reference, &reward, cfg.beta, x, x_s)?,
        };
        let row = Dist::new(policy.row_probs(x)?)?;
        let t = tv(&row, &target)?;
        max_tv = max_tv.max(t);
        per_prompt_tv.push((x, t));
    }
    write_output(out_dir, "trained_lm.json", &lm_to_json(&policy)?)?;

    let pass = cfg.tv_tolerance.is_none_or(|tol| max_tv <= tol);
    let last = trace.last().expect("trace has at least one row");
    let report = TrainReport {
        variant,
        seed,
        final_loss: last.loss,
        final_grad_norm: last.grad_norm,
        max_tv_to_optimum: max_tv,
        per_prompt_tv,
        tv_tolerance: cfg.tv_tolerance,
        pass,
        config: cfg,
    };
    emit_json(out_dir, "train_report.json", &report)?;
    if !pass {
        eprintln!("final TV to the closed-form optimum exceeded the configured tolerance");
        return Ok(ExitCode::from(EXIT_CHECK_FAILED));
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// Odometer over the cartesian product of grid axes.
fn grid_points(grid: &[GridAxis]) -> anyhow::Result<Vec<Vec<(String, f64)>>> {
    if grid.is_empty() {
        bail!("sweep grid is empty");
    }
    for axis in grid {
        if axis.values.is_empty() {
            bail!("grid axis {} has no values", axis.param);
        }
    }
    let mut points = vec![Vec::new()];
    for axis in grid {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for p in &points {
            for &v in &axis.values {
                let mut q = p.clone();
                q.push((axis.param.clone(), v));
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

fn apply_zone_param(params: &mut ZoneParams, key: &str, value: f64) -> anyhow::Result<()> {
    match key {
        "n" => params.n = value as usize,
        "n0" => params.n0 = value as usize,
        "p" => params.p = value,
        "eps" => params.eps = value,
        other => bail!("unknown zone sweep parameter `{other}`"),
    }
    Ok(())
}

fn apply_jailbreak_param(
    cfg: &mut JailbreakSimConfig,
    key: &str,
    value: f64,
) -> anyhow::Result<()> {
    match key {
        "p" => cfg.p = value,
        "eps" => cfg.eps = value,
        "draws" => cfg.draws = value as u64,
        other => bail!("unknown jailbreak sweep parameter `{other}`"),
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepSummary {
    kind: &'static str,
    seed: u64,
    rows: usize,
    all_checks_passed: bool,
}

pub fn cmd_sweep(config: &Path, seed: u64, out_dir: &Path) -> anyhow::Result<ExitCode> {
    let cfg: SweepConfig = load_config(config)?;
    let base_dir = config.parent().unwrap_or(Path::new("."));
    let mut all_ok = true;
    let (kind, csv, rows) = match &cfg {
        SweepConfig::Zone { base, grid } => {
            let mut csv =
                String::from("n,n0,p,eps,dist,rvol_exact,rvol_gauss,a,a_eps,a_prime\n");
            let points = grid_points(grid)?;
            let rows = points.len();
            for point in points {
                let mut params = base.clone();
                for (key, value) in &point {
                    apply_zone_param(&mut params, key, *value)?;
                }
                let zone = ZoneSpec::new(params.n, params.n0, params.p, params.eps, params.dist)?;
                let rec = zone_record(&zone, None)?;
                let opt = |o: Option<f64>| o.map_or(String::new(), csv_f64);
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{}",
                    rec.n,
                    rec.n0,
                    csv_f64(rec.p),
                    csv_f64(rec.eps),
                    rec.dist,
                    csv_f64(rec.rvol_exact),
                    csv_f64(rec.rvol_gauss),
                    csv_f64(rec.a),
                    opt(rec.a_eps),
                    opt(rec.a_prime),
                );
            }
            ("zone", csv, rows)
        }
        SweepConfig::Jailbreak { base, grid } => {
            let mut csv = String::from(
                "p,eps,draws,empirical,std_err,gamma_s,a,a_eps,bound,pass\n",
            );
            let points = grid_points(grid)?;
            let rows = points.len();
            for point in points {
                let mut sim = base.clone();
                for (key, value) in &point {
                    apply_jailbreak_param(&mut sim, key, *value)?;
                }
                let (report, _) = run_jailbreak(&sim, base_dir, seed)?;
                if !report.pass {
                    all_ok = false;
                }
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{}",
                    csv_f64(sim.p),
                    csv_f64(sim.eps),
                    sim.draws,
                    csv_f64(report.empirical),
                    csv_f64(report.std_err),
                    csv_f64(report.gamma_s),
                    csv_f64(report.a),
                    csv_f64(report.a_eps),
                    csv_f64(report.bound),
                    report.pass,
                );
            }
            ("jailbreak", csv, rows)
        }
    };
    write_output(out_dir, "sweep.csv", &csv)?;
    emit_json(
        out_dir,
        "sweep.json",
        &SweepSummary { kind, seed, rows, all_checks_passed: all_ok },
    )?;
    if !all_ok {
        eprintln!("at least one sweep point failed its bound check");
        return Ok(ExitCode::from(EXIT_CHECK_FAILED));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn default_out_dir(out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from("."))
}
