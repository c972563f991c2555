//! `hmae` — desk-scale masked-autoencoder pipeline for histology-style
//! imagery: corpus generation, self-supervised pretraining, frozen-embedding
//! extraction, probe evaluation, attention maps, and 2-D projection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{load_config, Preset};

#[derive(Parser)]
#[command(name = "hmae", version, about = "Masked-autoencoder pretraining and probing pipeline")]
struct Cli {
    /// JSON run-configuration file, deep-merged over defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Model preset applied before the config file.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    /// Dotted-path config override, e.g. `--set training.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed; sets the training, corpus, probe, and eval seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample filtered crops from the slides directory into a corpus.
    Generate,
    /// Pretrain the masked autoencoder on the corpus.
    Pretrain {
        /// Continue from the existing checkpoint's step counter.
        #[arg(long)]
        resume: bool,
    },
    /// Embed every corpus region with the frozen checkpointed encoder.
    Embed,
    /// Train probes over repeated runs and write the metrics report.
    ProbeEval,
    /// Render per-head attention heatmaps for one image.
    Attend {
        /// Input image (resized to the model's input size if needed).
        image: PathBuf,
    },
    /// Project the embedding store to 2-D with t-SNE.
    Project,
}

fn run(cli: &Cli) -> hmae_core::Result<()> {
    if cli.threads == 0 {
        return Err(hmae_core::Error::Config("--threads must be at least 1".into()));
    }
    let cfg = load_config(cli.preset, cli.config.as_deref(), &cli.set, cli.seed)?;
    match &cli.cmd {
        Command::Generate => commands::cmd_generate(&cfg, cli.threads),
        Command::Pretrain { resume } => commands::cmd_pretrain(&cfg, cli.threads, *resume),
        Command::Embed => commands::cmd_embed(&cfg, cli.threads),
        Command::ProbeEval => commands::cmd_probe_eval(&cfg, cli.threads),
        Command::Attend { image } => commands::cmd_attend(&cfg, image),
        Command::Project => commands::cmd_project(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
