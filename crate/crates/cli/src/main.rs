//! `uniseq`: the pipeline from raw corpora to trained, evaluated models.
//!
//! Exit status is 0 on success, 1 for bad arguments or inputs and 2 when a
//! valid run fails.

mod commands;
mod config;
mod data;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uniseq_core::train::Metric;
use uniseq_core::ExecMode;

use crate::config::{ModelOverrides, PlanOverrides};

/// A user-input problem detected by the CLI itself.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser)]
#[command(name = "uniseq", version, about = "Unified multimodal seq2seq pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run on one thread.
    #[arg(long)]
    pub sequential: bool,
    /// Leave the timestamp field out of reports.
    #[arg(long)]
    pub no_timestamp: bool,
}

impl Common {
    pub fn exec(&self) -> ExecMode {
        if self.sequential {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn byte-level BPE merges from text files (one example per line).
    BpeTrain(BpeTrainArgs),
    /// Combine a BPE model with location and vision ranges.
    VocabBuild(VocabBuildArgs),
    /// Fit the k-means patch codebook.
    VqTrain(VqTrainArgs),
    /// Masked text/image and detection pretraining.
    Pretrain(PretrainArgs),
    /// Supervised training on task manifests.
    Finetune(TrainArgs),
    /// Instruction tuning on task manifests (20 epochs unless overridden).
    Instruct(TrainArgs),
    /// Decode and score a manifest.
    Eval(EvalArgs),
    /// Decode a manifest and print the outputs.
    Generate(GenerateArgs),
    /// Train one model per hyperparameter cell and rank on a dev split.
    Gridsearch(GridArgs),
    /// Compare scores with and without per-field token truncation.
    AblateTruncation(AblateArgs),
    /// Open-vocabulary evaluation grouped by task.
    ZeroShot(ZeroShotArgs),
    /// Parameter counts of the size presets.
    ParamCount(ParamCountArgs),
}

#[derive(Args)]
pub struct BpeTrainArgs {
    #[arg(long = "corpus", required = true)]
    pub corpora: Vec<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub merges: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct VocabBuildArgs {
    #[arg(long)]
    pub bpe: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub locations: u32,
    #[arg(long, default_value_t = 8192)]
    pub vision: u32,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct VqTrainArgs {
    /// Manifests whose images feed the codebook.
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    /// Extra PNM images.
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value_t = config::DEFAULT_PATCH_SIZE)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 256)]
    pub codes: usize,
    #[arg(long, default_value_t = 20)]
    pub iterations: usize,
    #[arg(long, default_value_t = uniseq_core::task::DEFAULT_MAX_PATCHES)]
    pub max_patches: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the distortion trace.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the per-step loss report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub max_patches: Option<usize>,
    #[command(flatten)]
    pub model: ModelOverrides,
    #[command(flatten)]
    pub plan: PlanOverrides,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Codebook for masked-image targets.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    #[arg(long)]
    pub mlm_ratio: Option<f64>,
    #[arg(long)]
    pub mim_ratio: Option<f64>,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown metric `{s}` (accuracy, rouge_l, cider)"))
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Beam width; without it, greedy decoding.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Restrict outputs to each episode's answer set.
    #[arg(long)]
    pub constrained: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_metric, default_value = "rouge_l")]
    pub metrics: Vec<Metric>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct GridArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    #[arg(long = "dev", required = true)]
    pub dev: Vec<PathBuf>,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub lrs: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub batch_sizes: Vec<usize>,
    #[arg(long = "epoch-grid", value_delimiter = ',', required = true)]
    pub epoch_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.06")]
    pub warmup_ratios: Vec<f64>,
    #[arg(long, value_parser = parse_metric, default_value = "rouge_l")]
    pub metric: Metric,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub model: ModelOverrides,
    #[command(flatten)]
    pub plan: PlanOverrides,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// BPE tokens kept per text field.
    #[arg(long, default_value_t = 50)]
    pub cap: usize,
    #[arg(long, value_parser = parse_metric, default_value = "accuracy")]
    pub metric: Metric,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct ZeroShotArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// JSON object from task name to its class labels.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct ParamCountArgs {
    /// Vocabulary file supplying the range sizes.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Range sizes `T,L,V` when no vocabulary file is given.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<u32>,
    #[arg(long, default_value_t = config::DEFAULT_PATCH_SIZE)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[command(flatten)]
    pub common: Common,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<uniseq_core::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::BpeTrain(a) => commands::bpe_train(a),
        Command::VocabBuild(a) => commands::vocab_build(a),
        Command::VqTrain(a) => commands::vq_train(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a, uniseq_core::train::TrainPlan::default().epochs),
        Command::Instruct(a) => commands::finetune(a, commands::INSTRUCT_EPOCHS),
        Command::Eval(a) => commands::eval(a),
        Command::Generate(a) => commands::generate_cmd(a),
        Command::Gridsearch(a) => commands::gridsearch(a),
        Command::AblateTruncation(a) => commands::ablate(a),
        Command::ZeroShot(a) => commands::zero_shot(a),
        Command::ParamCount(a) => commands::param_count(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
