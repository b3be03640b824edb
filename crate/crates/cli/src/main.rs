use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nnkg_cli::commands::{self, CliError};
use nnkg_cli::RunConfig;

#[derive(Parser)]
#[command(name = "nnkg", version, about = "Logical query answering over incomplete knowledge graphs")]
struct Cli {
    /// Run configuration (flat key = value file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "NNKG_OUT", default_value = "nnkg-out")]
    out: PathBuf,
    /// Re-check generated answer sets with an independent traversal.
    #[arg(long, global = true)]
    verify: bool,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a graph bundle from train.txt, valid.txt and test.txt.
    Ingest { triples: PathBuf },
    /// Sample query files for the configured splits and structures.
    Generate,
    Train,
    /// Filtered hard-answer metrics of a checkpoint.
    Eval,
    /// Nearest entities to one query, e.g. "(p 0 (e 1))".
    Rank { query: String },
    /// Describe a bundle directory, checkpoint or query file.
    Info { path: PathBuf },
}

fn config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for item in &cli.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(threads) = cli.threads {
        cfg.set("threads", &threads.to_string())?;
    }
    if cli.verify {
        cfg.set("verify", "true")?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Ingest { triples } => commands::ingest(&cfg, triples, out),
        Command::Generate => commands::generate(&cfg, out),
        Command::Train => commands::train_cmd(&cfg, out),
        Command::Eval => commands::eval_cmd(&cfg, out),
        Command::Rank { query } => commands::rank_cmd(&cfg, query, out),
        Command::Info { path } => commands::info(path),
    }
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
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
