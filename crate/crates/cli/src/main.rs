//! `tokenfusion`: train, evaluate, gradient-check and size fusion models.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tokenfusion", version, about = "CNN and ViT token fusion for image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set model.head_type=mixing`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// CIFAR-10 binary directory, replacing the configured dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.jsonl, weights.bin and resolved_config.json.
    Train(Common),
    /// Report loss, acc@1 and acc@5 of saved weights on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Compare backpropagated gradients with finite differences in float64.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print parameter counts per module and in total.
    Params(Common),
    /// List the named model variants.
    ListVariants {
        /// Print a JSON array instead of one name per line.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Eval { common, weights } => commands::eval(&common, &weights),
        Command::Gradcheck { common, inject_fault } => commands::gradcheck(&common, inject_fault),
        Command::Params(c) => commands::params(&c),
        Command::ListVariants { json } => commands::list_variants(json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
