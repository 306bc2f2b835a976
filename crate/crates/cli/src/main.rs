//! `vsa`: generate datasets, train learners, evaluate and inspect them.
//!
//! Exit codes: 0 success, 2 validation error, 3 generation error, 4 state error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "vsa", version, about = "Superordinate concept learning on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample scenes and questions into a dataset directory.
    Generate(GenerateArgs),
    /// Run the two-lesson curriculum and write a checkpoint.
    Train(TrainArgs),
    /// Accuracy per question type.
    Eval(EvalArgs),
    /// Learned shortcut tables against the sampler's injected conditionals.
    BiasReport(BiasArgs),
    /// Mapped objects of one subspace as CSV, plus cluster purity.
    ClusterExport(ClusterArgs),
    /// Print the resolved training and universe configuration.
    PrintConfig(PrintConfigArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for scenes and questions.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the generative model; datasets that share it share features.
    #[arg(long, default_value_t = 0)]
    pub universe_seed: u64,
    /// Reuse the generative model stored in another dataset's universe.json.
    #[arg(long, conflicts_with_all = ["universe_seed", "noise_sigma"])]
    pub universe: Option<PathBuf>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long, default_value = "uniform")]
    pub condition: String,
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    #[arg(long, default_value_t = 10)]
    pub questions_per_scene: usize,
    #[arg(long, default_value_t = 3)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 10)]
    pub max_objects: usize,
    /// Programs must be shallower than this.
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Comma-separated question types; all seven by default.
    #[arg(long, value_delimiter = ',')]
    pub qtypes: Vec<String>,
    /// `attr:rho`, e.g. `color:0.25`. Repeatable.
    #[arg(long)]
    pub perturb: Vec<String>,
    /// Attribute that questions must not mention. Repeatable.
    #[arg(long)]
    pub forbid: Vec<String>,
    /// First scene id.
    #[arg(long, default_value_t = 0)]
    pub id_offset: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AblateArg {
    None,
    NoCc,
    NoSl,
    NoAbs,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training config JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training datasets, comma-separated or repeated; they must share one universe.
    #[arg(long, env = "VSA_DATA_DIR", default_value = "data", value_delimiter = ',')]
    pub data: Vec<PathBuf>,
    /// Validation dataset. Without it, trailing training scenes are held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    pub ablate: AblateArg,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training report; defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Mixture before freezing, clustered when the cache is populated, else exclusive.
    Auto,
    Mixture,
    Super,
    Clustered,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DebiasSpaceArg {
    Probability,
    Logit,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, env = "VSA_DATA_DIR", default_value = "data")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "on")]
    pub debias: OnOff,
    /// Answer with ground-truth judgments instead of a learner.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, value_enum, default_value = "auto")]
    pub mode: ModeArg,
    /// Override the distance decay of the clustered judgment.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Override the debiasing strength.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Subtract shortcut estimates from probabilities or from log-probabilities.
    #[arg(long, value_enum)]
    pub debias_space: Option<DebiasSpaceArg>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct BiasArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `all` or `src:dst`, e.g. `color:shape`.
    #[arg(long, default_value = "all")]
    pub heads: String,
    /// Sampler condition the training data came from.
    #[arg(long, default_value = "uniform")]
    pub condition: String,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CentersArg {
    /// Per-concept means of the reference set.
    Means,
    /// The learner's quasi-centers.
    Cache,
}

#[derive(Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, env = "VSA_DATA_DIR", default_value = "data")]
    pub data: PathBuf,
    #[arg(long)]
    pub superordinate: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the mapped coordinates.
    #[arg(long)]
    pub with_mapped: bool,
    #[arg(long, value_enum, default_value = "means")]
    pub centers: CentersArg,
    /// Dataset for the per-concept means; defaults to the exported data.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Args)]
pub struct PrintConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    pub ablate: AblateArg,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).target(env_logger::Target::Stderr).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::BiasReport(a) => commands::bias_report(a),
        Command::ClusterExport(a) => commands::cluster_export(a),
        Command::PrintConfig(a) => commands::print_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
