//! Command implementations behind the `popflow` binary.

pub mod commands;
pub mod manifest;
pub mod pipeline;

use std::path::{Path, PathBuf};

use clap::Args;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] popflow::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
    #[error("replay mismatch: {0}")]
    Replay(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> CliError {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Invalid(_) => 2,
            _ => 1,
        }
    }
}

/// Overrides applied on top of the baseline configuration (or `--config`).
#[derive(Debug, Clone, Default, Args)]
pub struct SimArgs {
    /// Configuration JSON; flags given alongside override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Side of the square layout, km.
    #[arg(long = "box-km", visible_alias = "L")]
    pub box_km: Option<f64>,
    /// Force variance, yr⁻².
    #[arg(long)]
    pub vf: Option<f64>,
    /// Uniform damping rate, yr⁻¹.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Coupling range, km.
    #[arg(long)]
    pub r0: Option<f64>,
    /// Lower population wall.
    #[arg(long)]
    pub x0: Option<f64>,
    /// Upper population wall.
    #[arg(long)]
    pub xm: Option<f64>,
    /// Finite-size noise variance.
    #[arg(long)]
    pub vw: Option<f64>,
    /// Time step, yr.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub burn_in: Option<u64>,
    /// Record every stride-th step after burn-in.
    #[arg(long)]
    pub stride: Option<u64>,
    /// direct or normal-mode.
    #[arg(long, value_parser = commands::parse_scheme)]
    pub scheme: Option<popflow::simulate::Scheme>,
    /// Use raw kernel rows as force weights.
    #[arg(long)]
    pub raw_forces: bool,
}

pub struct Globals {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub planar: bool,
}

impl Globals {
    /// The given seed, or a fresh one announced on stderr.
    pub fn seed_or_generate(&self) -> u64 {
        self.seed.unwrap_or_else(|| {
            let s = rand::random::<u64>();
            eprintln!("seed: {s}");
            s
        })
    }
}
