use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod inputs;

#[derive(Parser)]
#[command(
    name = "patchmil",
    version,
    about = "Patch-level tooth-mark detection from image labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Adapters {
    /// Read `<stem>.box.txt` and `<stem>.mask.png` beside each image.
    Stub,
    /// Run an external program per image.
    External,
}

#[derive(Subcommand)]
enum Command {
    /// Crop the tongue out of every image in a directory.
    Extract {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "stub")]
        adapters: Adapters,
        #[arg(long)]
        out: PathBuf,
        /// Program for `--adapters external`; called as `PROGRAM [ARGS..] IMAGE OUT_PREFIX`.
        #[arg(long)]
        command: Option<PathBuf>,
        #[arg(long = "command-arg", allow_hyphen_values = true)]
        command_args: Vec<String>,
        /// Run config supplying extraction settings; falls back to $PATCHMIL_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model on the configured manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from `last.safetensors` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// k-fold cross-validation on the configured manifest.
    Crossval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Detections and overlays for a directory of crops or a manifest.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Allow boxes anywhere on the patch grid.
        #[arg(long)]
        no_edge_mask: bool,
        /// Merge 4-connected patch boxes.
        #[arg(long)]
        merge: bool,
        #[arg(long)]
        threshold: Option<f64>,
        /// micm_masked, cls_head or either_positive.
        #[arg(long)]
        rule: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Attention-rollout heat maps only.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic planted-patch dataset and a matching toy run config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract {
            input,
            adapters,
            out,
            command,
            command_args,
            config,
        } => commands::extract::run(&input, adapters, &out, command, command_args, config),
        Command::Train { config, resume } => commands::train::train(config, resume),
        Command::Crossval { config, seed } => commands::train::crossval(config, seed),
        Command::Infer {
            checkpoint,
            input,
            out,
            no_edge_mask,
            merge,
            threshold,
            rule,
            config,
        } => commands::infer::infer(commands::infer::InferArgs {
            checkpoint,
            input,
            out,
            no_edge_mask,
            merge,
            threshold,
            rule,
            config,
        }),
        Command::Rollout {
            checkpoint,
            input,
            out,
            config,
        } => commands::infer::rollout(&checkpoint, &input, &out, config),
        Command::Synth {
            out,
            count,
            seed,
            size,
        } => commands::synth::run(&out, count, seed, size),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
