use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flix::config::RunConfig;
use flix::harness::{self, Overrides};
use flix::FlixError;

#[derive(Parser)]
#[command(name = "flix", version, about = "Personalized federated optimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (flat `section.key = value` file)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `run.seed`)
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve every client locally and write the local-model bundle
    PrecomputeLocal,
    /// Run the configured solver sweep and write metrics CSVs
    Run,
    /// Run the built-in bound and invariant checks
    Verify,
    /// Print the communication ladder and confirm each rung
    Budget,
}

fn exit_code(e: &FlixError) -> u8 {
    match e {
        FlixError::Config(_) | FlixError::InvalidArgument(_) | FlixError::Parse { .. } | FlixError::Unsupported(_) => 2,
        _ => 1,
    }
}

fn threads() -> Result<Option<usize>, FlixError> {
    match std::env::var("FLIX_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(FlixError::Config(format!(
                "FLIX_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn load(path: &Option<PathBuf>) -> Result<RunConfig, FlixError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Err(FlixError::Config("--config PATH is required".into())),
    }
}

fn run(cli: Cli) -> Result<bool, FlixError> {
    let ov = Overrides {
        out: cli.out.clone(),
        seed: cli.seed,
    };
    let threads = threads()?;
    match cli.command {
        Command::PrecomputeLocal => {
            let cfg = load(&cli.config)?;
            let path = harness::with_threads(threads, || harness::cmd_precompute_local(&cfg, &ov))??;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Run => {
            let cfg = load(&cli.config)?;
            let m = harness::with_threads(threads, || harness::cmd_run(&cfg, &ov))??;
            for r in &m.runs {
                match &r.error {
                    None => println!("{} ok ({} rows)", r.run_id, r.rows),
                    Some(e) => println!("{} {}: {e}", r.run_id, r.status),
                }
            }
            Ok(m.failed() == 0)
        }
        Command::Verify => {
            let cfg = cli.config.as_ref().map(|p| RunConfig::load(p)).transpose()?;
            let rep = harness::with_threads(threads, || harness::cmd_verify(cfg.as_ref(), &ov))??;
            for c in &rep.checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("[{tag}] {}: measured {:e}, bound {:e}", c.name, c.measured, c.bound);
            }
            Ok(rep.passed)
        }
        Command::Budget => {
            let cfg = load(&cli.config)?;
            let rep = harness::with_threads(threads, || harness::cmd_budget(&cfg, &ov))??;
            print!("{}", rep.render());
            Ok(rep.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("flix: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
