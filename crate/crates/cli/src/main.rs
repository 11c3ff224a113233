//! `bmfg`: solve, simulate and verify linear-quadratic backward mean-field
//! games from a JSON model file.

use std::path::PathBuf;
use std::process::ExitCode;

use backward_mfg::population::{Mode, ZetaDiffusion};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod report;

use commands::Settings;
use report::Overrides;

#[derive(Parser)]
#[command(name = "bmfg", version, about = "Backward mean-field game solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Check the model file and print a report.
    Validate,
    /// Solve the finite-N and limit Riccati equations.
    Riccati,
    /// Simulate a population and chart agent trajectories.
    Simulate,
    /// Estimate the ε-Nash gap along a population ladder.
    Verify,
    /// Run the N = 300 benchmark and emit the four figures and a summary.
    ReproducePaper,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Decentralized,
    Centralized,
    Both,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum DiffusionArg {
    #[default]
    Corrected,
    AsPrinted,
}

#[derive(Args)]
struct Flags {
    /// Model JSON file; the bundled benchmark model when omitted.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Population size N.
    #[arg(long, global = true)]
    agents: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    replications: Option<usize>,
    /// Population sizes for `verify`, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    ladder: Option<Vec<usize>>,
    /// Number of consecutive seeds pooled by `verify`, starting at the model seed.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Agents drawn in fan charts.
    #[arg(long, global = true, default_value_t = 30)]
    fan: usize,
    /// Agents whose best response `verify` computes.
    #[arg(long, global = true, default_value_t = 8)]
    sampled_agents: usize,
    /// Random deviation directions per sampled agent at the largest ladder size (0 skips probes).
    #[arg(long, global = true, default_value_t = 0)]
    probes: usize,
    /// Diffusion of the centralized adjoint offsets.
    #[arg(long, global = true, value_enum, default_value_t)]
    zeta_diffusion: DiffusionArg,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<backward_mfg::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let f = cli.flags;
    let modes = match f.mode.unwrap_or(ModeArg::Both) {
        ModeArg::Decentralized => vec![Mode::Decentralized],
        ModeArg::Centralized => vec![Mode::Centralized],
        ModeArg::Both => vec![Mode::Decentralized, Mode::Centralized],
    };
    let settings = Settings {
        model: f.model,
        out: f.out,
        overrides: Overrides {
            steps: f.steps,
            agents: f.agents,
            seed: f.seed,
            replications: f.replications,
            ladder: f.ladder,
            seeds: f.seeds,
            mode: f.mode.map(|m| m.to_possible_value().expect("no skipped variants").get_name().to_string()),
        },
        fan: f.fan,
        sampled_agents: f.sampled_agents,
        probes: f.probes,
        zeta_diffusion: match f.zeta_diffusion {
            DiffusionArg::Corrected => ZetaDiffusion::Corrected,
            DiffusionArg::AsPrinted => ZetaDiffusion::AsPrinted,
        },
    };
    let result = match cli.command {
        Command::Validate => commands::validate(&settings),
        Command::Riccati => commands::riccati(&settings),
        Command::Simulate => commands::simulate(&settings, &modes),
        Command::Verify => commands::verify(&settings),
        Command::ReproducePaper => commands::reproduce_paper(&settings),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
