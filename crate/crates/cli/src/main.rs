mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use steer_core::intervention::LayerGate;
use steer_core::model::ModelConfig;

use crate::config::{parse_gate, DecodingKind, Overrides, Settings};
use crate::error::{CliError, Result};

/// Image-attention steering for a toy multimodal decoder, with CHAIR, POPE
/// and text-inertia evaluation.
#[derive(Parser)]
#[command(name = "steer", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a seeded model and write its manifest, weights and a starter vocabulary.
    InitModel(InitArgs),
    /// Decode every prompt and write tokens, step traces and attention ratios.
    Generate(RunArgs),
    /// Score captions with CHAIR.
    EvalChair(ChairArgs),
    /// Build POPE question items from object annotations.
    PopeBuild(PopeBuildArgs),
    /// Answer and score POPE items.
    EvalPope(EvalPopeArgs),
    /// Probe hallucinated objects for text inertia.
    Inertia(InertiaArgs),
    /// Rebuild attention-ratio reports from a step trace file.
    AttnReport(AttnArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, default_value = "model")]
    out: PathBuf,
    /// File stem for the manifest and weight blob.
    #[arg(long, default_value = "model")]
    name: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 16)]
    d_head: usize,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 1024)]
    max_seq: usize,
    /// Raw image feature width; defaults to d_model.
    #[arg(long)]
    feature_dim: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f32>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f32>,
    /// `all`, `from:<layer>` or `sim:<threshold>`.
    #[arg(long, value_parser = parse_gate)]
    gate: Option<LayerGate>,
    #[arg(long, value_enum)]
    decoding: Option<DecodingKind>,
    /// Beam width [default: 5].
    #[arg(long)]
    beams: Option<usize>,
    #[arg(long)]
    top_p: Option<f32>,
    #[arg(long)]
    temperature: Option<f32>,
    /// [default: 512]
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Root seed [default: 7].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Disable amplification and contrastive refinement.
    #[arg(long)]
    vanilla: bool,
}

impl RunArgs {
    fn settings(&self) -> Result<Settings> {
        let ov = Overrides {
            alpha: self.alpha,
            gamma: self.gamma,
            gate: self.gate,
            decoding: self.decoding,
            beams: self.beams,
            top_p: self.top_p,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
            out: self.out.clone(),
            vanilla: self.vanilla,
        };
        Settings::load(self.config.as_deref(), &ov)
    }
}

#[derive(Args)]
struct ChairArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Captions JSONL (`image_id`, `caption`).
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Ground-truth objects JSONL (`image_id`, `objects`).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Lexicon JSON (`canonical`, `synonyms`).
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PopeBuildArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Object annotations JSONL (`image_id`, `objects`).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// random, popular or adversarial.
    #[arg(long)]
    split: Option<String>,
    /// Images to sample [default: all eligible].
    #[arg(long)]
    n_images: Option<usize>,
    /// Questions per image, half present and half absent [default: 6].
    #[arg(long)]
    questions: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalPopeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Items JSONL written by pope-build.
    #[arg(long)]
    items: Option<PathBuf>,
    /// Pre-computed answers JSONL (`image_id`, `turn_index`, `answer`);
    /// without it the model answers.
    #[arg(long)]
    answers: Option<PathBuf>,
    /// single_turn or multi_turn.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct InertiaArgs {
    #[command(flatten)]
    run: RunArgs,
    /// tokens.jsonl written by generate.
    #[arg(long)]
    generations: Option<PathBuf>,
    /// Tokens regenerated per case [default: 10].
    #[arg(long)]
    regen_window: Option<usize>,
}

#[derive(Args)]
struct AttnArgs {
    /// steps.jsonl written by generate.
    #[arg(long)]
    steps: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn plain_settings(config: Option<&PathBuf>, seed: Option<u64>, out: Option<&PathBuf>) -> Result<Settings> {
    let ov = Overrides {
        seed,
        out: out.cloned(),
        ..Overrides::default()
    };
    Settings::load(config.map(PathBuf::as_path), &ov)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("STEER_DECODE_THREADS") {
        let n = v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::config("STEER_DECODE_THREADS", format!("`{v}` is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Runtime(e.to_string()))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::InitModel(a) => {
            let cfg = ModelConfig {
                n_layers: a.layers,
                n_heads: a.heads,
                d_model: a.d_model,
                d_head: a.d_head,
                vocab_size: a.vocab_size,
                max_seq: a.max_seq,
                seed: a.seed,
                feature_dim: a.feature_dim,
            };
            commands::init::run(cfg, &a.out, &a.name)
        }
        Command::Generate(a) => commands::generate::run(&a.settings()?),
        Command::EvalChair(a) => {
            let s = plain_settings(a.config.as_ref(), None, a.out.as_ref())?;
            let inputs = commands::chair::ChairInputs {
                captions: a.captions,
                truth: a.truth,
                lexicon: a.lexicon,
            };
            commands::chair::run(&s, &inputs)
        }
        Command::PopeBuild(a) => {
            let s = plain_settings(a.config.as_ref(), a.seed, a.out.as_ref())?;
            let inputs = commands::pope::BuildInputs {
                annotations: a.annotations,
                split: a.split,
                n_images: a.n_images,
                questions: a.questions,
            };
            commands::pope::build(&s, &inputs)
        }
        Command::EvalPope(a) => {
            let s = a.run.settings()?;
            let inputs = commands::pope::EvalInputs {
                items: a.items,
                answers: a.answers,
                mode: a.mode,
            };
            commands::pope::eval(&s, &inputs)
        }
        Command::Inertia(a) => {
            let s = a.run.settings()?;
            let inputs = commands::inertia::InertiaInputs {
                generations: a.generations,
                regen_window: a.regen_window,
            };
            commands::inertia::run(&s, &inputs)
        }
        Command::AttnReport(a) => commands::generate::attn_report(&a.steps, &a.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = thread_pool().and_then(|pool| pool.install(|| dispatch(cli.command)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
