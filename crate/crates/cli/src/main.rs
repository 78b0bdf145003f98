//! `grip`: pretrain reference networks, run unlearning grids with routing
//! constraints, sweep the null-space threshold, probe with expert forcing,
//! validate artifacts and aggregate reports.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use grip_core::attack::{ForcingMode, ForcingPolicy};
use grip_core::unlearn::{Enforcement, Objective};

use commands::{Ctx, GridSpec};
use config::ExperimentConfig;
use error::Result;

#[derive(Parser, Debug)]
#[command(name = "grip", version, about = "Routing-invariant unlearning experiments on toy mixture-of-experts networks")]
struct Cli {
    /// TOML experiment config; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config and GRIP_OUTPUT_DIR).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Seeds to run (repeatable or comma separated; overrides the config).
    #[arg(long = "seed", global = true, value_delimiter = ',')]
    seeds: Vec<u64>,

    /// Worker threads (overrides the config and GRIP_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Write one JSON object per completed unit of work to this file.
    #[arg(long, global = true)]
    stats: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grid {
    /// Every objective under every enforcement mode.
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the reference network of each seed and capture its retain cache
    /// and pre-unlearning selection trace.
    Pretrain,
    /// Run unlearning cells from the pretrained networks.
    Unlearn {
        /// gd, kl, npo or rmu.
        #[arg(long)]
        objective: Option<Objective>,
        /// none, expert_specific, full_null or ptc.
        #[arg(long = "enforce")]
        enforcement: Option<Enforcement>,
        /// Run the whole objective x enforcement grid (flags above narrow it).
        #[arg(long, value_enum)]
        grid: Option<Grid>,
        /// Unlearning steps (overrides the config).
        #[arg(long)]
        steps: Option<usize>,
        /// Null-space threshold (overrides the config).
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Expert-specific runs at thresholds 1e-4, 1e-3, 1e-2 and 1e-1.
    SweepEps {
        #[arg(long)]
        objective: Option<Objective>,
        /// Threshold relative to the largest eigenvalue of each retain Gram
        /// matrix instead of raw eigenvalues.
        #[arg(long)]
        eps_relative: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Expert-forcing probe of every unlearned checkpoint.
    Attack {
        /// top_m_nonselected or pre_selection.
        #[arg(long)]
        forcing_mode: Option<ForcingMode>,
        /// Experts forced per layer.
        #[arg(long)]
        m: Option<usize>,
        /// Probe the forced experts one at a time and count any hit.
        #[arg(long)]
        best_of: bool,
    },
    /// Check existing artifacts against their formats without computing.
    Validate,
    /// Aggregate per-run CSVs into summary.csv.
    Report,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if !cli.seeds.is_empty() {
        cfg.seeds = cli.seeds.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    match &cli.command {
        Command::Unlearn { steps, eps, .. } => {
            if let Some(s) = steps {
                cfg.unlearn.steps = *s;
            }
            if let Some(e) = eps {
                cfg.unlearn.eps = *e;
            }
        }
        Command::SweepEps { steps: Some(s), .. } => cfg.unlearn.steps = *s,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let ctx = Ctx::new(cfg, cli.stats.as_deref())?;
    match cli.command {
        Command::Pretrain => commands::cmd_pretrain(&ctx),
        Command::Unlearn { objective, enforcement, grid, .. } => {
            let spec = GridSpec { objective, enforcement, full: grid.is_some() };
            commands::cmd_unlearn(&ctx, &spec)
        }
        Command::SweepEps { objective, eps_relative, .. } => commands::cmd_sweep_eps(&ctx, objective, eps_relative),
        Command::Attack { forcing_mode, m, best_of } => {
            let base = &ctx.cfg.unlearn.attack;
            let policy = ForcingPolicy {
                mode: forcing_mode.unwrap_or(base.mode),
                m: m.or(base.m),
                best_of: best_of || base.best_of,
            };
            commands::cmd_attack(&ctx, &policy)
        }
        Command::Validate => commands::cmd_validate(&ctx),
        Command::Report => commands::cmd_report(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
