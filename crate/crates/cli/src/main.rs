//! `swg`: data generation, training, sampling, evaluation and latency
//! benchmarks for self-weighted guidance.

mod commands;
mod config;
mod data;
mod fail;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::fail::CliResult;
use crate::run::{RunDir, VERSION};

#[derive(Parser)]
#[command(name = "swg", version, about = "Self-weighted guidance experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a toy action dataset or bandit transitions.
    GenerateData(Common),
    /// Train a denoiser, critic or critic-weighted policy; --checkpoint resumes.
    Train(Common),
    /// Draw guided samples from a denoiser checkpoint.
    Sample(Common),
    /// Score a sample file against the toy target, or a critic checkpoint
    /// against the bandit's exact values.
    Eval(Common),
    /// Time guided and unguided sampling over network depth and width.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult<()> {
    let (name, c) = match &cli.command {
        Command::GenerateData(c) => ("generate-data", c),
        Command::Train(c) => ("train", c),
        Command::Sample(c) => ("sample", c),
        Command::Eval(c) => ("eval", c),
        Command::Bench(c) => ("bench", c),
    };
    let (cfg, bytes) = ExperimentConfig::load(&c.config)?;
    let cfg = cfg.resolve(c.seed)?;
    let mut dir = RunDir::create(&c.out)?;
    dir.record_bytes("config", &bytes);
    let ck = c.checkpoint.as_deref();
    match &cli.command {
        Command::GenerateData(_) => commands::generate_data(&cfg, &mut dir)?,
        Command::Train(_) => commands::train_cmd(&cfg, ck, &mut dir)?,
        Command::Sample(_) => {
            // keep the provenance files even when chains diverge
            let r = commands::sample_cmd(&cfg, ck, &mut dir);
            dir.finish(name, &cfg)?;
            return r;
        }
        Command::Eval(_) => commands::eval_cmd(&cfg, ck, &mut dir)?,
        Command::Bench(_) => commands::bench_cmd(&cfg, &mut dir)?,
    }
    dir.finish(name, &cfg)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{VERSION}: error: {e}");
            ExitCode::from(e.code)
        }
    }
}
