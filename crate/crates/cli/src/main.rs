//! `mycoclip`: generate the synthetic dataset, caption it, train the dual encoder and
//! evaluate zero-shot Recall@1.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mycoclip::config::Provider;
use mycoclip::dataset::Split;

#[derive(Debug, Parser)]
#[command(name = "mycoclip", version, about = "Synthetic fungal growth-stage CLIP pipeline")]
pub struct Cli {
    /// Pipeline configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Total number of images (a multiple of 3).
    #[arg(long, global = true)]
    pub count: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub provider: Option<ProviderArg>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render images, write template captions and the manifest.
    Generate,
    /// (Re)write the per-class caption files.
    Caption,
    /// Train the encoders on the generated dataset.
    Train,
    /// Zero-shot evaluation of a trained checkpoint.
    Eval {
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        /// Defaults to the run directory's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// generate → caption → train → eval.
    Pipeline,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProviderArg {
    Template,
    Remote,
}

impl From<ProviderArg> for Provider {
    fn from(p: ProviderArg) -> Self {
        match p {
            ProviderArg::Template => Provider::Template,
            ProviderArg::Remote => Provider::Remote,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
