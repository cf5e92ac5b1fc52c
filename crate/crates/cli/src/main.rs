use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use popflow_cli::pipeline::AnalysisOptions;
use popflow_cli::{commands, CliError, Globals, SimArgs};

/// Population-flow correlations and Langevin city-growth simulation.
#[derive(Debug, Parser)]
#[command(name = "popflow", version)]
struct Cli {
    /// Seed for every random draw; generated and printed when absent.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "popflow-out")]
    out_dir: PathBuf,
    /// Municipality coordinates are x_km,y_km instead of lon,lat.
    #[arg(long, global = true)]
    planar: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Correlation analysis of a census panel.
    Analyze {
        #[arg(long)]
        municipalities: PathBuf,
        #[arg(long)]
        populations: PathBuf,
        #[command(flatten)]
        options: AnalysisOptions,
    },
    /// Integrate the coupled Langevin system.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        /// Re-run a previous simulation and verify its output digests.
        #[arg(long, conflicts_with = "config")]
        replay: Option<PathBuf>,
    },
    /// Eigenvalues and leading eigenvectors of the coupling matrix.
    Modes {
        /// Number of modes to export.
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Take positions from a municipality table instead of a simulated layout.
        #[arg(long, conflicts_with_all = ["config", "n", "box_km"])]
        municipalities: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long = "box-km", visible_alias = "L")]
        box_km: Option<f64>,
        #[arg(long)]
        r0: Option<f64>,
    },
    /// Simulate, analyze the simulated panel and compare with the configuration.
    Loopback {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        options: AnalysisOptions,
        /// Contiguous time blocks used for batch standard errors.
        #[arg(long, default_value_t = 10)]
        blocks: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = Globals { seed: cli.seed, out_dir: cli.out_dir, planar: cli.planar };
    let result = std::fs::create_dir_all(&g.out_dir).map_err(|e| CliError::io(&g.out_dir, e)).and_then(|_| match cli.command {
        Command::Analyze { municipalities, populations, options } => {
            commands::analyze(&g, &municipalities, &populations, &options)
        }
        Command::Simulate { sim, replay } => match replay {
            Some(m) => commands::replay(&g, &m),
            None => commands::simulate(&g, &sim),
        },
        Command::Modes { k, municipalities, config, n, box_km, r0 } => {
            commands::modes(&g, k, municipalities.as_deref(), config.as_deref(), n, box_km, r0)
        }
        Command::Loopback { sim, options, blocks } => commands::loopback(&g, &sim, &options, blocks),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
