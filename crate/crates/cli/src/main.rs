//! `formation`: learn, align and compare multi-agent formations from tracking data.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use formation_core::ingest::{Format, RosterPolicy};

mod commands;
mod manifest;

/// Bad input or arguments; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "formation", version, about = "Role-based formation discovery for multi-agent tracking data")]
struct Cli {
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a formation and role-ordered data from one tracking file.
    Discover(DiscoverArgs),
    /// Run the soft and hard learners on the same input and compare them.
    Compare(CompareArgs),
    /// Time one iteration of each learner as the number of agents grows.
    Bench(BenchArgs),
    /// Learn one formation per metadata context, aligned to a shared template.
    Context(ContextArgs),
    /// Grow a template tree by recursive discovery and clustering.
    Tree(TreeArgs),
    /// Write a synthetic tracking file with known roles.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// Tracking file (long format, one row per agent per frame).
    #[arg(long)]
    pub input: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<Format>,
    /// What to do with frames whose agent set differs from the roster.
    #[arg(long, default_value = "strict")]
    pub roster: RosterPolicy,
    /// Train on event frames only.
    #[arg(long)]
    pub key_frames_only: bool,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    /// JSON discovery config (a bare config, or a manifest from an earlier run); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Largest allowed covariance eigenvalue ratio before the spherical update.
    #[arg(long)]
    pub eig_ratio: Option<f64>,
    #[arg(long)]
    pub em_tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// K-means initializer: player-means or random.
    #[arg(long)]
    pub init: Option<String>,
}

#[derive(Args, Debug)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only frames matching `key=value[,key!=value…]` over team, game, period, event.
    #[arg(long)]
    pub filter: Option<String>,
    /// Template JSON to align the learned formation to.
    #[arg(long)]
    pub parent_template: Option<PathBuf>,
    #[arg(long, default_value = "soft-em")]
    pub learner: String,
    #[arg(long, default_value = "bhattacharyya")]
    pub align_cost: String,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub filter: Option<String>,
    /// Largest cluster count in the WCE sweep.
    #[arg(long, default_value_t = 20)]
    pub sweep_k_max: usize,
    /// Monte-Carlo samples for the overlap penalty.
    #[arg(long, default_value_t = 100_000)]
    pub overlap_samples: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Agent counts to time.
    #[arg(long, value_delimiter = ',', default_value = "4,6,8,10,12,14")]
    pub n_values: Vec<usize>,
    #[arg(long, default_value_t = 1500)]
    pub frames: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Timed iterations per method per repetition (median is kept).
    #[arg(long, default_value_t = 5)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GroupField {
    Team,
    Game,
    Period,
}

#[derive(Args, Debug)]
pub struct ContextArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// One context per expression; repeatable.
    #[arg(long)]
    pub filter: Vec<String>,
    /// One context per distinct value of this field.
    #[arg(long)]
    pub group_by: Option<GroupField>,
    /// Shared template; learned from all input frames when omitted.
    #[arg(long)]
    pub parent_template: Option<PathBuf>,
    #[arg(long, default_value = "bhattacharyya")]
    pub align_cost: String,
}

#[derive(Args, Debug)]
pub struct TreeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub filter: Option<String>,
    /// Root parent template; the per-agent distributions when omitted.
    #[arg(long)]
    pub parent_template: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 200)]
    pub min_node_rows: usize,
    #[arg(long, default_value_t = 0.01)]
    pub min_improvement: f64,
    #[arg(long, default_value_t = 0.35)]
    pub min_split_score: f64,
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub k_candidates: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "csv")]
    pub format: Format,
    /// Agents (and roles) per formation.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Minimum role separation in units of the largest role standard deviation.
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1500)]
    pub frames: usize,
    #[arg(long, default_value_t = 0.05)]
    pub swap_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    pub event_rate: f64,
    /// Fraction of frames stored attacking right to left.
    #[arg(long, default_value_t = 0.0)]
    pub rtl_rate: f64,
    /// Independent formations, one per team label.
    #[arg(long, default_value_t = 1)]
    pub contexts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use formation_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidInput(_)
                | E::Parse { .. }
                | E::Roster { .. }
                | E::EmptySelection(_)
                | E::UnknownStrategy { .. }
                | E::Csv(_)
                | E::Json(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = cli.threads;
    let go = move || match cli.command {
        Command::Discover(a) => commands::discover(&a, threads),
        Command::Compare(a) => commands::compare(&a, threads),
        Command::Bench(a) => commands::bench(&a, threads),
        Command::Context(a) => commands::context(&a, threads),
        Command::Tree(a) => commands::tree(&a, threads),
        Command::Synth(a) => commands::synth(&a, threads),
    };
    match threads {
        Some(0) => Err(UsageError("--threads must be at least 1".into()).into()),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(go),
        None => go(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
