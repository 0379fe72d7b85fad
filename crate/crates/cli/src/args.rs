use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use anime_adapter::backends::ControllerKind;
use anime_adapter::injection::{MaskMode, Scope};

#[derive(Debug, Parser)]
#[command(name = "animeadapter", version, about = "Reference-image adapter: dataset, training, sampling and evaluation")]
pub struct Cli {
    /// TOML run configuration; surrogate defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Use Hugging Face CLIP vision weights for the encoder slot. Relative
    /// paths resolve against $ANIMEADAPTER_CACHE.
    #[arg(long, global = true)]
    pub clip_weights: Option<PathBuf>,
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter metadata, build prompts, render references and write a manifest.
    BuildDataset(BuildDatasetArgs),
    /// Train the adapter on a manifest.
    Train(TrainArgs),
    /// Sample images conditioned on one or more references.
    Generate(GenerateArgs),
    /// Run the evaluation tasks and write metric reports.
    Evaluate(EvaluateArgs),
    /// Train and evaluate over a grid of scope × mask × controller.
    Ablate(AblateArgs),
    /// Print a checkpoint's header and validate its integrity.
    InspectCheckpoint(InspectArgs),
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Line-delimited Danbooru-style metadata.
    #[arg(long)]
    pub metadata: PathBuf,
    /// Tag taxonomy table; the bundled table when omitted.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Framing/style deny pairs; the bundled list when omitted.
    #[arg(long)]
    pub deny: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `all` or a comma-separated list of task names.
    #[arg(long, default_value = "all")]
    pub tasks: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub controller: Option<ControllerKind>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub scope: Option<Scope>,
    /// Continue from a checkpoint, restoring optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train with all-ones token masks.
    #[arg(long)]
    pub no_mask: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Adapter checkpoint; omit together with --base for the base model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sample from the base model without the adapter.
    #[arg(long)]
    pub base: bool,
    /// Reference image (repeatable).
    #[arg(long = "ref", required = true)]
    pub refs: Vec<PathBuf>,
    /// Subject mask for the reference at the same position (repeatable).
    #[arg(long = "mask")]
    pub masks: Vec<PathBuf>,
    /// Injection scale for the reference at the same position (repeatable).
    #[arg(long = "scale")]
    pub scales: Vec<f64>,
    /// Comma-separated tags.
    #[arg(long, default_value = "")]
    pub prompt: String,
    /// Skeleton file for the pose controller.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    #[arg(short = 'n', long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub mode: Option<MaskMode>,
    /// Expected adapter scope; an error if the checkpoint differs.
    #[arg(long)]
    pub scope: Option<Scope>,
    #[arg(long)]
    pub controller: Option<ControllerKind>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Task name or `all`.
    #[arg(long, default_value = "all")]
    pub task: String,
    /// identity | base | adapter
    #[arg(long, default_value = "adapter")]
    pub generator: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Axes to vary, e.g. `scope×mask×controller` or `scope,mask`.
    #[arg(long, default_value = "scope×mask×controller")]
    pub grid: String,
    /// Training steps per grid point.
    #[arg(long, default_value_t = 200)]
    pub steps: u64,
    #[arg(long, default_value = "all")]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}
