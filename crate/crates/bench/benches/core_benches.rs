//! Benchmarks for the numeric hot paths: special functions, binomial
//! volume sums, simplex sampling, the Monte Carlo volume oracle and the
//! preference-loss gradient.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use aligngeom_core::adversary::{gamma_s_estimate, DirichletPosterior};
use aligngeom_core::erlhf::{loss_gradient, DpoVariant, RewardTable, TrainData};
use aligngeom_core::probkit::{gauss_cdf, log_binom, zeta_partial, DistanceKind};
use aligngeom_core::simplex::{mc_rvol, rvol_harmful_exact, sample_uniform, ZoneSpec};
use aligngeom_core::toyworld::{build_world, TabularLM, WorldConfig};

fn bench_special_functions(c: &mut Criterion) {
    c.bench_function("gauss_cdf sweep", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            let mut x = -8.0;
            while x <= 8.0 {
                acc += gauss_cdf(black_box(x));
                x += 0.01;
            }
            acc
        })
    });
    c.bench_function("zeta_partial s=1.5", |b| {
        b.iter(|| zeta_partial(black_box(1.5), black_box(1)).unwrap())
    });
    c.bench_function("log_binom n=1e6", |b| {
        b.iter(|| log_binom(black_box(1_000_000), black_box(333_333)).unwrap())
    });
}

fn bench_simplex(c: &mut Criterion) {
    let big = ZoneSpec::new(10_000, 3_000, 0.25, 0.0, DistanceKind::L1).unwrap();
    c.bench_function("rvol_harmful_exact n=1e4", |b| {
        b.iter(|| rvol_harmful_exact(black_box(&big)))
    });
    c.bench_function("sample_uniform n=50 x1000", |b| {
        b.iter(|| sample_uniform(black_box(50), black_box(7), black_box(1000)).unwrap())
    });
    let zone = ZoneSpec::new(10, 3, 0.2, 0.0, DistanceKind::L1).unwrap();
    c.bench_function("mc_rvol n=10 100k", |b| {
        b.iter(|| mc_rvol(black_box(&zone), black_box(100_000), black_box(1)).unwrap())
    });
}

fn bench_gamma_s(c: &mut Criterion) {
    let posterior =
        DirichletPosterior::new((1..=12).map(|i| 1.0 + i as f64 / 4.0).collect()).unwrap();
    let zone = ZoneSpec::new(12, 6, 0.1, 0.05, DistanceKind::L1).unwrap();
    c.bench_function("gamma_s_estimate n=12", |b| {
        b.iter(|| gamma_s_estimate(black_box(&posterior), black_box(&zone)).unwrap())
    });
}

fn bench_preference_gradient(c: &mut Criterion) {
    let cfg = WorldConfig {
        num_queries: 5,
        num_concepts: 2,
        num_explanations: 6,
        num_harmful_explanations: 2,
        num_filler_explanations: 1,
        plausible_queries_per_concept: 4,
        heldout_queries_per_concept: 1,
        support_size: 3,
        harmful_support_count: 2,
        designated_safe_count: 2,
        harmful_concepts: vec![0],
        eta: 0.05,
        dirichlet_alpha: 1.5,
        aligned_queries: true,
    };
    let world = build_world(&cfg, 7).unwrap();
    let reward = RewardTable::from_labels(&world, 1.0, -1.0, 0.0).unwrap();
    let prompts = world.direct_prompts_of_concept(0);
    let pairs: Vec<(usize, usize)> = prompts.iter().map(|&x| (x, x)).collect();
    let reference = TabularLM::random(world.num_prompts(), world.num_explanations, 0.5, 1);
    let policy = TabularLM::random(world.num_prompts(), world.num_explanations, 0.5, 2);
    c.bench_function("expected dpo gradient", |b| {
        b.iter_batched(
            || policy.clone(),
            |p| {
                loss_gradient(
                    &p,
                    &reference,
                    &TrainData::Expected {
                        bt_reward: &reward,
                        world: &world,
                        prompt_pairs: &pairs,
                    },
                    0.5,
                    DpoVariant::Dpo,
                )
                .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(
    benches,
    bench_special_functions,
    bench_simplex,
    bench_gamma_s,
    bench_preference_gradient
);
criterion_main!(benches);
