use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use neural_stein::cli::{self, CliError, Command, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "neural-stein",
    version,
    about = "Neural Stein critics for goodness-of-fit testing"
)]
struct Args {
    #[command(subcommand)]
    verb: Verb,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Train one critic and write curves, checkpoints and result.json.
    Train,
    /// Train (or load `checkpoint`) and run a single test.
    Gof,
    /// Monte-Carlo power over independently trained replicas.
    Power,
    /// KSD power over the bandwidth grid.
    Ksd,
    /// Lazy-training deviation against the kernel dynamics.
    Ntk,
    /// Power across train/test split fractions.
    SweepSplit,
}

impl From<Verb> for Command {
    fn from(v: Verb) -> Self {
        match v {
            Verb::Train => Command::Train,
            Verb::Gof => Command::Gof,
            Verb::Power => Command::Power,
            Verb::Ksd => Command::Ksd,
            Verb::Ntk => Command::Ntk,
            Verb::SweepSplit => Command::SweepSplit,
        }
    }
}

fn execute(args: &Args) -> Result<(), CliError> {
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = cli::resolve_out(&cfg, args.out.as_deref());
    cfg.out_dir = out.to_string_lossy().into_owned();
    cli::run(args.verb.into(), &cfg, &out)?;
    println!("{}", out.join("result.json").display());
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
