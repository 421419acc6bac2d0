//! `artihippo`: drives a lifelong run from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "artihippo", version, about = "Lifelong learning with growing projection experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Task index.
    #[arg(long, global = true)]
    task: Option<usize>,
    /// Command-specific mode.
    #[arg(long, global = true)]
    mode: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train the first task and write the base checkpoint.
    Pretrain,
    /// Learn the next (or `--task`) task of the manifest.
    Learn,
    /// Report task-incremental metrics; `--mode class` adds class-incremental columns.
    Eval,
    /// Component finetuning study; `--mode "head;proj;mhsa+ln1"`.
    Study,
    /// Write the architecture grid of the run.
    ExportArch,
    /// Predict task and class without task labels; `--mode max|min-entropy`.
    InferCi,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
