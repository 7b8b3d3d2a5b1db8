use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dermo_cli::pipeline::{run_augment, run_diagnose, run_structures, Outcome};
use dermo_cli::{run_gradcheck, CliError, PipelineConfig};

/// Dermoscopy lesion pipeline: views, structure maps and diagnosis.
#[derive(Parser, Debug)]
#[command(name = "dermo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Case directory holding cases.json (augment)
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Work directory; overrides `output_dir`
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Seed for every random draw; overrides `seed`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated case ids to process
    #[arg(long, global = true, value_delimiter = ',')]
    cases: Option<Vec<String>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rotate, crop and resize every case into views with polar maps
    Augment,
    /// Structure probability maps per view, projected when labels exist
    Structures,
    /// Per-view and fused class probabilities
    Diagnose,
    /// Finite-difference check of every differentiable block
    Gradcheck {
        /// Corrupt one block's backward pass (negative control)
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

const EXIT_CONFIG: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Config(msg)) => {
            eprintln!("error: configuration: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.output {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    let work = config.output_dir.clone();
    let filter = cli.cases.as_deref();

    let outcome = match cli.command {
        Command::Augment => {
            let input = cli
                .input
                .as_ref()
                .ok_or_else(|| CliError::Config("augment needs --input DIR".into()))?;
            run_augment(&config, input, &work, filter)?.1
        }
        Command::Structures => run_structures(&config, &work, filter)?.1,
        Command::Diagnose => run_diagnose(&config, &work, filter)?.1,
        Command::Gradcheck { corrupt } => {
            let report = run_gradcheck(config.seed, corrupt.as_deref())?;
            for block in &report.blocks {
                let verdict = if block.max_error <= report.tolerance { "ok" } else { "FAIL" };
                println!("{:<20} trials={:<3} max_rel_error={:.3e} {verdict}", block.name, block.trials, block.max_error);
            }
            return Ok(if report.passed() { 0 } else { 1 });
        }
    };
    report(outcome);
    Ok(outcome.exit_code() as u8)
}

fn report(outcome: Outcome) {
    println!("{} case(s) succeeded, {} failed", outcome.succeeded, outcome.failed);
}
