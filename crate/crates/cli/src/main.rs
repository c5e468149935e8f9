mod analyze;
mod commands;
mod config;
mod manifest;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use paia_core::audit::PromptStrategy;
use paia_core::diffusion::ScheduleKind;
use paia_core::training::Optimizer;

use crate::util::Failure;

type Ids = Vec<usize>;

#[derive(Parser, Debug)]
#[command(name = "paia", version, about = "Concept auditing for LoRA-fine-tuned diffusion models")]
pub struct Cli {
    /// Root for default artifact paths (also read from PAIA_DATA_ROOT).
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    /// TOML config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the procedural glyph corpus.
    GenData(GenDataArgs),
    /// Train the base denoiser.
    TrainBase(TrainBaseArgs),
    /// Fine-tune a LoRA delta on one or more concepts, optionally under an attack.
    Finetune(FinetuneArgs),
    /// Audit a fine-tuned model for one or more concepts.
    Audit(AuditArgs),
    /// Train every artifact of a seeded desk benchmark.
    Benchmark(BenchmarkArgs),
    /// Diagnostic studies.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 45)]
    pub concepts: usize,
    #[arg(long, default_value_t = 26)]
    pub per_concept: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: <data-root>/corpus).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Probability of dropping the caption during training.
    #[arg(long)]
    pub uncond_prob: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainBaseArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Concepts to train on, e.g. `30-44` or `0,3,5` (default: all).
    #[arg(long, value_parser = util::parse_list)]
    pub concepts: Option<Ids>,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value = "cosine")]
    pub schedule: ScheduleKind,
    /// Trunk width (default 64).
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Attention projection width `d` (default 32).
    #[arg(long)]
    pub attn_dim: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Checkpoint path (default: <data-root>/base.ckpt).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttackArg {
    None,
    PromptDeviation,
    Regularization,
    EarlyFreezing,
    LateFreezing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

impl From<OptimizerArg> for Optimizer {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::Adam,
        }
    }
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Concept(s) to fine-tune on.
    #[arg(long, value_parser = util::parse_list)]
    pub concept: Ids,
    #[arg(long, value_enum, default_value = "none")]
    pub attack: AttackArg,
    /// Strength of the regularization attack.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = paia_core::adapters::DEFAULT_RANK)]
    pub rank: usize,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Delta path (default: <data-root>/deltas/concept_<C>_<attack>.lora).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// LoRA delta under audit.
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus directory holding the target concept's images.
    #[arg(long)]
    pub target_images: PathBuf,
    /// Corpus directory holding the irrelevant pool.
    #[arg(long)]
    pub irrelevant_images: PathBuf,
    /// Concept(s) to audit.
    #[arg(long, value_parser = util::parse_list)]
    pub concept: Ids,
    /// Restrict the irrelevant pool to these concepts (default: all in the directory).
    #[arg(long, value_parser = util::parse_list)]
    pub irrelevant_concepts: Option<Ids>,
    #[arg(long, default_value_t = 10)]
    pub targets_per_concept: usize,
    #[arg(long)]
    pub strategy: Option<PromptStrategy>,
    /// Comma-separated timesteps, e.g. `13,25,38,50`.
    #[arg(long, value_parser = util::parse_list)]
    pub t_grid: Option<Ids>,
    #[arg(long)]
    pub gamma: Option<usize>,
    #[arg(long)]
    pub eps_draws: Option<usize>,
    #[arg(long)]
    pub irrelevant_budget: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip per-image error normalization.
    #[arg(long)]
    pub raw: bool,
    /// Calibrate once and reuse irrelevant features and base errors across concepts.
    #[arg(long)]
    pub reuse_cache: bool,
    /// Report directory (default: <data-root>/reports/audit_<model>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Attacks to train models for in addition to the clean set.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub attacks: Vec<AttackArg>,
    /// Concepts per fine-tuned model.
    #[arg(long, value_parser = util::parse_list, default_value = "1")]
    pub concept_counts: Ids,
    /// Regularization attack strength.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Benchmark directory (default: <data-root>/bench/seed_<S>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Study {
    Lemma1,
    Sensitivity,
    CeCurves,
    Sweeps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Spectral,
    Frobenius,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepDim {
    Gamma,
    Timestep,
    Budget,
    Conditional,
    Quantile,
    StrategyStage,
    ConceptCount,
    Attacks,
    Threshold,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long, value_enum)]
    pub study: Study,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Benchmark directory for the sweeps study.
    #[arg(long)]
    pub bench: Option<PathBuf>,
    /// Concept whose targets feed the CE curves.
    #[arg(long)]
    pub concept: Option<usize>,
    #[arg(long, value_parser = util::parse_list)]
    pub irrelevant_concepts: Option<Ids>,
    #[arg(long, value_parser = util::parse_list)]
    pub t_grid: Option<Ids>,
    #[arg(long, value_enum, default_value = "spectral")]
    pub norm: NormArg,
    /// (image, prompt) pairs for the sensitivity study.
    #[arg(long, default_value_t = 32)]
    pub pairs: usize,
    /// Random probes of the Lipschitz bound.
    #[arg(long, default_value_t = 1000)]
    pub probes: usize,
    #[arg(long, default_value_t = 4)]
    pub eps_draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sweep dimensions (default: all).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub dims: Vec<SweepDim>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = config::ConfigFile::load(cli.config.as_deref())?;
    let root = config::data_root(cli.data_root.clone(), &file);
    let ctx = util::Ctx { root, file };
    match cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, a),
        Command::TrainBase(a) => commands::train_base(&ctx, a),
        Command::Finetune(a) => commands::finetune(&ctx, a),
        Command::Audit(a) => commands::audit(&ctx, a),
        Command::Benchmark(a) => analyze::benchmark(&ctx, a),
        Command::Analyze(a) => analyze::analyze(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("paia: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
