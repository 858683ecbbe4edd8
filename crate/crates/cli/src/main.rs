//! Command-line front door for the zone-geometry, PAC-bound, jailbreak
//! simulation and preference-training experiments.
//!
//! Exit codes: 0 success, 1 a checked property failed (oracle mismatch,
//! bound violation, convergence tolerance), 2 usage or validation error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aligngeom_core::erlhf::DpoVariant;
use config::ZoneParams;

#[derive(Parser)]
#[command(
    name = "aligngeom",
    about = "Simplex zone geometry, PAC-Bayes pretraining bounds and bounded-adversary jailbreak experiments on toy tabular language models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Global RNG seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory for JSON/CSV artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Harmful-zone volumes and expansion constants for one zone spec.
    Zone(ZoneArgs),
    /// The PAC-Bayes complexity term and the harmful-mixture bound.
    Pac(PacArgs),
    /// Average-token-length and unique-prompt estimates from zeta sums.
    Atl(AtlArgs),
    /// Build or inspect world snapshots.
    World {
        #[command(subcommand)]
        action: WorldAction,
    },
    /// Jailbreak lower-bound experiment over a Dirichlet posterior.
    #[command(name = "jailbreak-sim")]
    JailbreakSim {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Preference training on tabular logits.
    Train {
        #[command(subcommand)]
        variant: TrainVariant,
    },
    /// Parameter-grid sweeps emitting one CSV row per point.
    Sweep {
        /// Sweep config (JSON).
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct ZoneArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    n0: usize,
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    /// Distance kind: l1, l2, linf, tv, jsd.
    #[arg(long, default_value = "l1")]
    dist: String,
    /// Cross-check against a Monte Carlo estimate with this many samples.
    #[arg(long)]
    mc: Option<u64>,
}

#[derive(Args)]
struct PacArgs {
    /// KL[rho || pi] in nats.
    #[arg(long)]
    kl: f64,
    /// Unique corpus prompts (scientific notation accepted).
    #[arg(long)]
    n: f64,
    #[arg(long)]
    delta: f64,
    /// Harmful mixture weight.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Empirical risk; adds the harmful-mixture bound to the record.
    #[arg(long)]
    empirical: Option<f64>,
}

#[derive(Args)]
struct AtlArgs {
    #[arg(long)]
    s: f64,
    #[arg(long)]
    t: f64,
    #[arg(long)]
    k0: u64,
    /// Corpus token count; adds the unique-prompt estimate.
    #[arg(long)]
    tokens: Option<f64>,
}

#[derive(Subcommand)]
enum WorldAction {
    /// Build a world from a config and write the snapshot plus a summary.
    Build {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize an existing world snapshot.
    Inspect {
        #[arg(long)]
        world: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainVariant {
    /// Reference anchored at the original prompt.
    Dpo {
        #[arg(long)]
        config: PathBuf,
    },
    /// Reference anchored at the safety-transformed prompt.
    Edpo {
        #[arg(long)]
        config: PathBuf,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("ALIGNGEOM_THREADS") {
        let threads: usize = value
            .parse()
            .map_err(|_| anyhow::anyhow!("ALIGNGEOM_THREADS must be a positive integer"))?;
        if threads == 0 {
            anyhow::bail!("ALIGNGEOM_THREADS must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| anyhow::anyhow!("configuring the thread pool: {e}"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    configure_threads()?;
    let out_dir = commands::default_out_dir(&cli.out);
    match cli.command {
        Command::Zone(args) => {
            let dist = args.dist.parse()?;
            let params = ZoneParams {
                n: args.n,
                n0: args.n0,
                p: args.p,
                eps: args.eps,
                dist,
            };
            commands::cmd_zone(&params, args.mc, cli.seed, &out_dir)
        }
        Command::Pac(args) => commands::cmd_pac(
            args.kl,
            args.n,
            args.delta,
            args.alpha,
            args.empirical,
            &out_dir,
        ),
        Command::Atl(args) => commands::cmd_atl(args.s, args.t, args.k0, args.tokens, &out_dir),
        Command::World { action } => match action {
            WorldAction::Build { config } => commands::cmd_world_build(&config, cli.seed, &out_dir),
            WorldAction::Inspect { world } => commands::cmd_world_inspect(&world, &out_dir),
        },
        Command::JailbreakSim { config } => {
            commands::cmd_jailbreak_sim(&config, cli.seed, &out_dir)
        }
        Command::Train { variant } => match variant {
            TrainVariant::Dpo { config } => {
                commands::cmd_train(DpoVariant::Dpo, &config, cli.seed, &out_dir)
            }
            TrainVariant::Edpo { config } => {
                commands::cmd_train(DpoVariant::Edpo, &config, cli.seed, &out_dir)
            }
        },
        Command::Sweep { config } => commands::cmd_sweep(&config, cli.seed, &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
