//! `bilagrid`: synthesize datasets, fit per-view grids, lift edits, and
//! score renders from the command line.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "bilagrid", version, about = "Bilateral-grid processing for voxel radiance fields")]
struct Cli {
    /// JSON run configuration; defaults apply to anything left out.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Root for outputs when neither --out nor `output_dir` is set.
    #[arg(long, global = true, env = "BILAGRID_OUT", default_value = "bilagrid-out")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene and write a processed multi-view dataset.
    Synth(SynthArgs),
    /// Jointly fit scene colors and per-view grids to a dataset.
    Fit(FitArgs),
    /// Lift an edited view into a low-rank 4D grid.
    Lift(LiftArgs),
    /// Render a view and process it with a fitted 3D grid.
    Apply(ApplyArgs),
    /// Render views, optionally finished with a 4D grid.
    Render(RenderArgs),
    /// Score predicted images against references.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep every grid at identity (no-grid baseline).
    #[arg(long)]
    pub freeze_grids: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr_color: Option<f64>,
    #[arg(long)]
    pub lr_grid: Option<f64>,
    #[arg(long)]
    pub lambda_tv: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct LiftArgs {
    /// Frozen scene (`.bscn`).
    #[arg(long)]
    pub scene: PathBuf,
    /// Camera list (JSON).
    #[arg(long)]
    pub cameras: PathBuf,
    /// Edited image (`.bimg` or `.png`).
    #[arg(long)]
    pub edited: PathBuf,
    /// Camera the edited image was taken from.
    #[arg(long)]
    pub camera_id: usize,
    /// Held-out cameras to render before and after; defaults to all others.
    #[arg(long, value_delimiter = ',')]
    pub views: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub mlp_guidance: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ApplyArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// 3D grid (`.bgrd`).
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub camera_id: usize,
    /// Output image; `.bimg` for float32, anything else PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    /// Cameras to render; defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub camera_id: Vec<usize>,
    /// 4D grid (`.bgr4`) applied to every radiance sample.
    #[arg(long)]
    pub grid4d: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of references with the same file names.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Round both images to 8 bits before scoring.
    #[arg(long)]
    pub quantized: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    let cfg = config::RunConfig::load(cli.config.as_deref())?;
    let ctx = commands::Context { cfg, out_root: cli.out_root };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Fit(a) => commands::fit(&ctx, a),
        Command::Lift(a) => commands::lift(&ctx, a),
        Command::Apply(a) => commands::apply(&ctx, a),
        Command::Render(a) => commands::render(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bilagrid: {e}");
            e.exit_code()
        }
    }
}
