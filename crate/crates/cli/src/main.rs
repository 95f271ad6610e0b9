mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tokensplit::adapters::{MergeMode, Variant};
use tokensplit::{Error, Result};

use crate::config::{Binding, Concept, Precision, RunConfig};

#[derive(Parser)]
#[command(
    name = "tokensplit",
    version,
    about = "Token-wise concept adapters and disentangled sampling on a toy diffusion model"
)]
struct Cli {
    /// Root directory for checkpoints, adapter databases and run outputs.
    #[arg(long, global = true, env = "TOKENSPLIT_OUT", default_value = "runs")]
    out: PathBuf,
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Output subdirectory for this run; each command has its own default.
    #[arg(long, global = true)]
    run: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate captioned scenes into a dataset bundle.
    GenDataset(GenDatasetArgs),
    /// Train or resume the base denoiser.
    TrainBase(TrainBaseArgs),
    /// Train a concept adapter and record it in the adapter database.
    TrainAdapter(TrainAdapterArgs),
    /// Sample one image with optional adapters and disentangled sampling.
    Infer(InferArgs),
    /// Sweep one inference setting over a list of values.
    Ablate(AblateArgs),
    /// Summarize a diagnostics file into entropy and overlap tables.
    Analyze(AnalyzeArgs),
    /// Print the adapters stored in a database.
    ListAdapters(ListArgs),
}

#[derive(Args)]
struct GenDatasetArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    first_seed: Option<u64>,
    /// Bundle path; defaults to `<out>/dataset.bin`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainBaseArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset bundle from `gen-dataset`; scenes are generated when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Continue from the existing checkpoint instead of starting fresh.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct TrainAdapterArgs {
    #[arg(long, value_enum)]
    concept: Option<Concept>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    word: Option<String>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Permit key-modifying variants.
    #[arg(long)]
    ablation: bool,
    /// Replace an existing adapter of the same name.
    #[arg(long)]
    overwrite: bool,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    db: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct InferArgs {
    #[arg(long)]
    prompt: Option<String>,
    /// Adapter to attach, as NAME or NAME=WORD; repeatable.
    #[arg(long = "adapter", value_name = "NAME[=WORD]")]
    adapters: Vec<String>,
    #[arg(long)]
    no_adapters: bool,
    /// Mix all adapters into every token instead of routing them.
    #[arg(long)]
    merged: bool,
    #[arg(long, conflicts_with_all = ["stage1_only", "afg_only"])]
    no_loda: bool,
    #[arg(long, conflicts_with = "afg_only")]
    stage1_only: bool,
    #[arg(long)]
    afg_only: bool,
    /// Words whose attention is separated; defaults to the bound words.
    #[arg(long, value_delimiter = ',')]
    tokens: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    /// Sampler steps given to latent optimization before guidance takes over.
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    amplify: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    suppress: Option<f64>,
    #[arg(long)]
    kl_threshold: Option<f64>,
    /// Record aggregated maps and export them as PGM grids.
    #[arg(long)]
    maps: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    db: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// Mask percentile.
    Gamma,
    /// Logit bonus on a token's own mask.
    P,
    /// Logit penalty on other tokens' masks.
    M,
    /// Number of latent-optimization steps.
    #[value(name = "n", alias = "N")]
    N,
    /// Adapter variant, resolved as `NAME` or `NAME@VARIANT`.
    Variant,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    values: Vec<String>,
    /// Seeds per value.
    #[arg(long, default_value_t = 4)]
    runs: usize,
    #[command(flatten)]
    infer: InferArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    diagnostics: PathBuf,
}

#[derive(Args)]
struct ListArgs {
    #[arg(long)]
    db: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl InferArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set(&mut cfg.prompt, self.prompt.clone());
        if !self.adapters.is_empty() {
            cfg.bindings = self.adapters.iter().map(|s| Binding::parse(s)).collect::<Result<_>>()?;
        }
        if self.no_adapters {
            cfg.use_adapters = false;
        }
        if self.merged {
            cfg.merge = MergeMode::Merged;
        }
        let inf = &mut cfg.inference;
        if self.no_loda {
            (inf.stage1, inf.afg) = (false, false);
        }
        if self.stage1_only {
            (inf.stage1, inf.afg) = (true, false);
        }
        if self.afg_only {
            (inf.stage1, inf.afg) = (false, true);
        }
        if !self.tokens.is_empty() {
            cfg.tokens = self.tokens.clone();
        }
        set(&mut inf.seed, self.seed);
        set(&mut inf.steps, self.steps);
        set(&mut inf.guidance, self.guidance);
        set(&mut inf.stage1_steps, self.stage1_steps);
        set(&mut inf.percentile, self.percentile);
        set(&mut inf.amplify, self.amplify);
        set(&mut inf.suppress, self.suppress);
        set(&mut inf.kl_threshold, self.kl_threshold);
        if self.maps {
            inf.record_maps = true;
        }
        Ok(())
    }
}

/// 2 for bad input, 3 for numeric failure, 1 for everything else.
fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        return 3;
    }
    match e {
        Error::Config { .. }
        | Error::Contract(_)
        | Error::OutOfVocabulary(_)
        | Error::WordNotInPrompt { .. }
        | Error::AblationGuard(_)
        | Error::ConceptExists(_)
        | Error::ConceptMissing(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    set(&mut cfg.precision, cli.precision);
    let ctx = commands::Context {
        out: cli.out,
        run: cli.run,
    };
    match cli.command {
        Command::GenDataset(a) => {
            set(&mut cfg.dataset.count, a.count);
            set(&mut cfg.dataset.first_seed, a.first_seed);
            commands::gen_dataset(&ctx, &cfg, a.output)
        }
        Command::TrainBase(a) => {
            set(&mut cfg.train.steps, a.steps);
            set(&mut cfg.train.lr, a.lr);
            set(&mut cfg.train.batch, a.batch);
            set(&mut cfg.train.seed, a.seed);
            if a.dataset.is_some() {
                cfg.dataset.bundle = a.dataset;
            }
            commands::train_base(&ctx, &cfg, a.checkpoint, a.resume)
        }
        Command::TrainAdapter(a) => {
            set(&mut cfg.concept.kind, a.concept);
            if a.name.is_some() {
                cfg.concept.name = a.name;
            }
            if a.word.is_some() {
                cfg.concept.word = a.word;
            }
            set(&mut cfg.adapter.variant, a.variant);
            if a.ablation {
                cfg.adapter.allow_ablation = true;
            }
            set(&mut cfg.adapter.iters, a.iters);
            set(&mut cfg.adapter.rank, a.rank);
            set(&mut cfg.adapter.lr, a.lr);
            set(&mut cfg.adapter.seed, a.seed);
            set(&mut cfg.concept.images, a.images);
            commands::train_adapter(&ctx, &cfg, a.checkpoint, a.db, a.overwrite)
        }
        Command::Infer(a) => {
            a.apply(&mut cfg)?;
            commands::infer(&ctx, &cfg, a.checkpoint, a.db)
        }
        Command::Ablate(a) => {
            a.infer.apply(&mut cfg)?;
            commands::ablate(&ctx, &cfg, a.axis, &a.values, a.runs, a.infer.checkpoint, a.infer.db)
        }
        Command::Analyze(a) => commands::analyze(&ctx, &a.diagnostics),
        Command::ListAdapters(a) => commands::list_adapters(&ctx, &cfg, a.db),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::config("x", "y")), 2);
        assert_eq!(exit_code(&Error::ConceptMissing("c".into())), 2);
        assert_eq!(
            exit_code(&Error::Divergence {
                step: 1,
                loss: f64::NAN
            }),
            3
        );
        assert_eq!(exit_code(&Error::Format("bad".into())), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
