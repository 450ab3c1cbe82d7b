//! `dlsp`: one binary driving the whole pipeline.
//!
//! Machine-readable results go to stdout as JSON, progress and errors to
//! stderr. Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::param_digest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub(crate) fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "dlsp", version, about = "Morphology surrogate pipeline: generate, label, train, explain and design OPV active layers")]
pub struct Cli {
    /// key=value config file with [chgen] [oracle] [train] [pbil] [serve] sections; flags win
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads [default: logical cores]
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Serial execution for bitwise-reproducible runs [default: off]
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run Cahn-Hilliard simulations and write snapshot PGMs plus a manifest
    Generate(GenerateArgs),
    /// Label every manifest entry with the device oracle and bin into classes
    Label(LabelArgs),
    /// Group-aware train/val/test split
    Split(SplitArgs),
    /// Train the CNN classifier
    Train(TrainArgs),
    /// Evaluate a model on one split
    Eval(EvalArgs),
    /// Gradient saliency map of one image
    Saliency(SaliencyArgs),
    /// PBIL morphology design with the CNN (or oracle) as fitness
    Design(DesignArgs),
    /// Evaluate one image with the device oracle
    Oracle(OracleArgs),
    /// Start the HTTP service
    Serve(ServeArgs),
}

#[derive(Debug, Args, Default, Clone)]
pub struct OracleFlags {
    /// Exciton diffusion length in pixels [default: 10]
    #[arg(long)]
    pub diffusion_length: Option<f64>,
    /// Charge transport decay length in pixels [default: 100]
    #[arg(long)]
    pub transport_length: Option<f64>,
    /// CG relative residual tolerance [default: 1e-8]
    #[arg(long)]
    pub solver_tol: Option<f64>,
    /// CG iteration cap [default: 20000]
    #[arg(long)]
    pub solver_max_iters: Option<usize>,
    /// Proxy-to-current scale [default: 14]
    #[arg(long)]
    pub j_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Number of simulation runs (seeds seed..seed+runs)
    #[arg(long)]
    pub runs: u64,
    /// Output directory for PGMs and manifest.csv
    #[arg(long)]
    pub out: PathBuf,
    /// First run seed [default: DLSP_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Lateral shift copies per snapshot; also adds a mirror [default: no augmentation]
    #[arg(long)]
    pub augment_shifts: Option<usize>,
    /// Comma-separated snapshot steps [default: 100,200,400,800,1600,3200,6400]
    #[arg(long)]
    pub snapshot_steps: Option<String>,
    /// Periodic simulation grid side, power of two [default: 128]
    #[arg(long)]
    pub grid_n: Option<usize>,
    /// Time step [default: 0.1]
    #[arg(long)]
    pub dt: Option<f64>,
    /// Gradient energy coefficient [default: 1]
    #[arg(long)]
    pub eps2: Option<f64>,
    /// Initial noise amplitude [default: 0.1]
    #[arg(long)]
    pub noise_amp: Option<f64>,
    /// Blend mean for every run [default: cycles through -0.2,-0.1,0,0.1,0.2 by seed]
    #[arg(long, allow_hyphen_values = true)]
    pub blend_mean: Option<f64>,
    /// Side of the centered crop written out [default: 101]
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Manifest to label in place (binning sidecar written next to it)
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub oracle: OracleFlags,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Manifest to split in place
    #[arg(long)]
    pub manifest: PathBuf,
    /// Train,val,test fractions [default: 0.7,0.15,0.15]
    #[arg(long)]
    pub fractions: Option<String>,
    /// Shuffle seed [default: DLSP_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled, split manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Weight file for the best-validation checkpoint
    #[arg(long)]
    pub out: PathBuf,
    /// Epochs [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size [default: 128]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initialization and shuffling seed [default: DLSP_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-epoch CSV [default: <out>.history.csv]
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Also save the last-epoch weights here [default: not saved]
    #[arg(long)]
    pub final_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Weight file
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// train, val or test [default: test]
    #[arg(long)]
    pub split: Option<String>,
    /// Confusion matrix CSV [default: <model>.confusion.csv]
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    /// Weight file
    #[arg(long)]
    pub model: PathBuf,
    /// Input PGM
    #[arg(long)]
    pub image: PathBuf,
    /// Output PGM of the normalized map
    #[arg(long)]
    pub out: PathBuf,
    /// Class whose logit is differentiated [default: predicted class]
    #[arg(long)]
    pub target: Option<u8>,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    /// Weight file (required for cnn fitness)
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// bilayer, uniform, a preset name, or a PGM path [default: bilayer]
    #[arg(long)]
    pub init: Option<String>,
    /// Maximum iterations [default: 200]
    #[arg(long)]
    pub iters: Option<usize>,
    /// Output directory for history.csv, P snapshots and best.pgm
    #[arg(long)]
    pub out: PathBuf,
    /// cnn (expected class) or oracle (jsc) [default: cnn]
    #[arg(long)]
    pub fitness: Option<String>,
    /// Population size [default: 100]
    #[arg(long)]
    pub n: Option<usize>,
    /// Elite count [default: 10]
    #[arg(long)]
    pub n_b: Option<usize>,
    /// Probability learning rate [default: 0.1]
    #[arg(long)]
    pub l_r: Option<f64>,
    /// Per-pixel mutation probability [default: 0.02]
    #[arg(long)]
    pub mutation_prob: Option<f64>,
    /// Mutation shift [default: 0.05]
    #[arg(long)]
    pub mutation_shift: Option<f64>,
    /// Box-blur radius applied to samples [default: 1]
    #[arg(long)]
    pub smoothing_radius: Option<usize>,
    /// Stop when best fitness improves less than this over the window [default: 0.001]
    #[arg(long)]
    pub improvement_tol: Option<f64>,
    /// Improvement window in iterations [default: 20]
    #[arg(long)]
    pub improvement_window: Option<usize>,
    /// Init probability offset [default: 0.1]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Iterations at which P is written [default: 10,30,50]
    #[arg(long)]
    pub snapshots: Option<String>,
    /// Sampling seed [default: DLSP_SEED or 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub oracle: OracleFlags,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Input PGM
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub oracle: OracleFlags,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Weight file [default: none; prediction endpoints answer 503]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Port [default: 8080]
    #[arg(long)]
    pub port: Option<u16>,
    /// Bind address [default: 127.0.0.1]
    #[arg(long)]
    pub host: Option<String>,
    /// Static files served at / [default: none]
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Concurrent design jobs [default: 4]
    #[arg(long)]
    pub max_jobs: Option<usize>,
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => config::Config::load(p)?,
        None => config::Config::default(),
    };
    let jobs = if cli.deterministic { Some(1) } else { cli.jobs };
    if jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let ctx = commands::Context {
        config,
        deterministic: cli.deterministic,
    };
    let body = move || commands::dispatch(&ctx, cli.command);
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(runtime)?
            .install(body),
        None => body(),
    }
}
