use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trimodal::alignment::Pair;
use trimodal::Modality;

mod commands;

#[derive(Debug, Parser)]
#[command(name = "trimodal", version, about = "Tri-modal alignment and missing-modality reconstruction")]
struct Cli {
    /// Log training progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic triplet corpus.
    Synth(SynthArgs),
    /// Contrastive pre-training of the three encoders.
    Pretrain(PretrainArgs),
    /// Train the fusion encoder and decoder for one missing modality.
    Mmr(MmrArgs),
    /// Evaluate a checkpoint and write a report.
    Eval(EvalArgs),
    /// Loss-weight ablation grid scored by R@k.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Dataset directory.
    #[arg(long, env = "TRIMODAL_DATA_DIR")]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,

    #[arg(long)]
    categories: Option<usize>,

    #[arg(long)]
    per_category: Option<usize>,

    /// Corpus seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Perturbation strength; 0 reproduces the class prototypes.
    #[arg(long)]
    jitter: Option<f32>,

    /// Output directory (defaults to the data directory).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,

    #[arg(long)]
    alpha: Option<f64>,

    #[arg(long)]
    beta: Option<f64>,

    #[arg(long)]
    gamma: Option<f64>,

    #[arg(long)]
    tau: Option<f64>,

    /// Train log τ jointly with the encoders.
    #[arg(long)]
    learnable_tau: bool,

    /// Restrict the objective to these pairs (img-txt, txt-aud, aud-img).
    #[arg(long, value_delimiter = ',', value_parser = parse_pair)]
    pairs: Vec<Pair>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    epochs: Option<usize>,

    #[arg(long)]
    lr: Option<f64>,

    #[arg(long)]
    batch_size: Option<usize>,

    /// Disable training-time augmentation.
    #[arg(long)]
    no_augment: bool,

    /// Checkpoint path (default: <out_dir>/pretrain.ckpt).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MissingArg {
    Image,
    Text,
    Audio,
}

impl From<MissingArg> for Modality {
    fn from(m: MissingArg) -> Self {
        match m {
            MissingArg::Image => Modality::Image,
            MissingArg::Text => Modality::Text,
            MissingArg::Audio => Modality::Audio,
        }
    }
}

#[derive(Debug, Args)]
struct MmrArgs {
    #[command(flatten)]
    common: Common,

    /// Modality to reconstruct.
    #[arg(long, value_enum)]
    missing: MissingArg,

    /// Pre-training checkpoint (default: <out_dir>/pretrain.ckpt).
    #[arg(long)]
    pretrained: Option<PathBuf>,

    #[arg(long)]
    delta: Option<f64>,

    #[arg(long)]
    eta: Option<f64>,

    #[arg(long)]
    theta: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    epochs: Option<usize>,

    #[arg(long)]
    lr: Option<f64>,

    #[arg(long)]
    batch_size: Option<usize>,

    /// Checkpoint path (default: <out_dir>/mmr-<missing>.ckpt).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Mmr,
    ZeroShot,
    Retrieval,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,

    #[arg(long, value_enum)]
    mode: EvalMode,

    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Zero-shot target modality.
    #[arg(long, value_enum, default_value = "audio")]
    target: MissingArg,

    /// Cutoffs for top-k or R@k columns.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,

    /// Report path prefix; `.json` and `.txt` are appended.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,

    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,

    #[arg(long, default_value_t = 10)]
    k: usize,

    #[arg(long)]
    epochs: Option<usize>,

    #[arg(long)]
    batch_size: Option<usize>,

    /// Report path prefix; `.json` and `.txt` are appended.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<Pair, String> {
    s.parse().map_err(|e: trimodal::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Mmr(a) => commands::mmr(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
