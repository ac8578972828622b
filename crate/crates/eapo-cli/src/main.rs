//! `eapo` — configuration-driven pipeline runner.
//!
//! Subcommands map one-to-one onto pipeline stages: `synth`, `pretrain`,
//! `adapt`, `eval`, and `run-all`. Each takes a JSON config document (or a
//! manifest from a previous run) and an output directory; a handful of
//! flags override the most commonly swept settings. Reports land on disk,
//! diagnostics on stderr (`EAPO_LOG=quiet|info|debug`), and the exit code is
//! zero iff every requested stage succeeded.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use eapo_core::experiment::{
    cmd_adapt, cmd_eval, cmd_pretrain, cmd_run_all, cmd_synth, DataConfig, ExperimentConfig,
};
use eapo_core::training::FinetuneMode;

#[derive(Parser)]
#[command(
    name = "eapo",
    version,
    about = "Long-tailed binary classification with test-distribution-aligned preference fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test tables
    Synth(StageArgs),
    /// Pretrain a classifier on the training table
    Pretrain(StageArgs),
    /// Retrieve the local manifold from test inputs and fine-tune
    Adapt(StageArgs),
    /// Evaluate the pretrained (and, if present, adapted) checkpoints
    Eval(StageArgs),
    /// Run synth, pretrain, adapt, and eval, then write a manifest
    RunAll(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// JSON config document or a manifest from a previous run (defaults used
    /// when omitted)
    #[arg(long)]
    config: Option<PathBuf>,

    /// Directory for artifacts and reports
    #[arg(long, default_value = "eapo_out")]
    out: PathBuf,

    /// Override every stage seed (data, model, pretrain, finetune)
    #[arg(long)]
    seed: Option<u64>,

    /// Override the retrieval width k
    #[arg(long)]
    k: Option<usize>,

    /// Override the fine-tuning mode
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Eapo,
    SftOnly,
}

fn resolve_config(args: &StageArgs) -> eapo_core::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        if let DataConfig::Synthetic(s) = &mut cfg.data {
            s.seed = seed;
        }
        cfg.model.seed = seed;
        cfg.pretrain.seed = seed;
        cfg.finetune.seed = seed;
    }
    if let Some(k) = args.k {
        cfg.finetune.k = k;
    }
    if let Some(mode) = args.mode {
        cfg.finetune.mode = match mode {
            ModeArg::Eapo => FinetuneMode::Eapo,
            ModeArg::SftOnly => FinetuneMode::SftOnly,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

type StageFn = fn(&ExperimentConfig, &std::path::Path) -> eapo_core::Result<()>;

fn run(cli: Cli) -> eapo_core::Result<()> {
    let (args, stage): (&StageArgs, StageFn) = match &cli.command {
        Command::Synth(a) => (a, |cfg, out| cmd_synth(cfg, out).map(drop)),
        Command::Pretrain(a) => (a, |cfg, out| cmd_pretrain(cfg, out).map(drop)),
        Command::Adapt(a) => (a, |cfg, out| cmd_adapt(cfg, out).map(drop)),
        Command::Eval(a) => (a, |cfg, out| cmd_eval(cfg, out).map(drop)),
        Command::RunAll(a) => (a, |cfg, out| cmd_run_all(cfg, out).map(drop)),
    };
    let cfg = resolve_config(args)?;
    stage(&cfg, &args.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
