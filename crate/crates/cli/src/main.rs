use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use selfmem_cli::commands;
use selfmem_cli::config::{Overrides, RunConfig};
use selfmem_cli::CliError;

#[derive(Parser)]
#[command(name = "selfmem", version, about = "Retrieval-augmented generation with iterative self-memory")]
struct Cli {
    /// Run config file (JSON). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Global seed, overriding the config and every nested seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Memory selection strategy: trained, oracle, random, or likelihood.
    #[arg(long, global = true)]
    strategy: Option<String>,

    /// Generator architecture: joint or dual.
    #[arg(long, global = true)]
    arch: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a task spec file.
    Synth {
        /// Task spec (JSON).
        spec: PathBuf,
    },
    /// Build the retrieval index over a corpus directory.
    Index {
        /// Corpus directory written by synth.
        corpus: PathBuf,
    },
    /// Train the retrieval-augmented generator.
    TrainGen,
    /// Decode selector-training candidate pools with the trained generator.
    Pool,
    /// Train the memory selector on decoded pools.
    TrainSel,
    /// Run the full select-and-regenerate loop and write the report.
    Loop,
    /// Score the generator on the test split under each memory regime.
    Ablate,
    /// Rebuild the report tables from a run directory.
    Report {
        /// Run directory holding config.json and loop artifacts.
        run_dir: PathBuf,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let overrides = Overrides {
        out: cli.out.clone(),
        seed: cli.seed,
        strategy: cli.strategy.clone(),
        arch: cli.arch.clone(),
    };
    RunConfig::resolve(cli.config.as_deref(), &overrides)
}

fn out_dir_of(cli: &Cli) -> Result<PathBuf, CliError> {
    cli.out
        .clone()
        .ok_or_else(|| CliError::config("this command requires --out".to_string()))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth { spec } => commands::cmd_synth(spec, &out_dir_of(cli)?),
        Command::Index { corpus } => {
            let cfg = resolve(cli)?;
            commands::cmd_index(corpus, &out_dir_of(cli)?, &cfg.retrieval)
        }
        Command::TrainGen => commands::cmd_train_gen(&resolve(cli)?),
        Command::Pool => commands::cmd_pool(&resolve(cli)?),
        Command::TrainSel => commands::cmd_train_sel(&resolve(cli)?),
        Command::Loop => commands::cmd_loop(&resolve(cli)?),
        Command::Ablate => commands::cmd_ablate(&resolve(cli)?),
        Command::Report { run_dir } => commands::cmd_report(run_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SELFMEM_LOG", "info"))
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code())
        }
    }
}
