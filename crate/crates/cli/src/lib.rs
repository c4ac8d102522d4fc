//! Command-line front end: `analyze`, `simulate` and `selfcheck`.

pub mod analyze;
pub mod config;
pub mod selfcheck;
pub mod simulate;

use std::ffi::OsString;

use clap::{Args, Parser, Subcommand};

use config::{AnalyzeArgs, AnalyzeConfig, SimulateArgs, SimulateConfig, UsageError};

#[derive(Debug, Parser)]
#[command(
    name = "permsplit",
    version,
    about = "Rank rated clusters with a random-intercept logistic model fitted by permutational splitting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a ratings file and write the ranking, summary and histogram.
    Analyze(AnalyzeArgs),
    /// Run the simulation study and write its tables.
    Simulate(SimulateArgs),
    /// Run the built-in oracle checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SelfcheckArgs {
    #[arg(long)]
    pub threads: Option<usize>,
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()?;
    Ok(pool.install(f))
}

fn run_command(command: Command) -> anyhow::Result<i32> {
    let stdout = std::io::stdout();
    match command {
        Command::Analyze(args) => {
            let cfg = AnalyzeConfig::resolve(&args)?;
            let out = with_threads(cfg.threads, || analyze::analyze(&cfg))??;
            analyze::write_outputs(&out, &cfg, &cfg.output_dir)?;
            for w in analyze::warnings(&out) {
                eprintln!("warning: {w}");
            }
            analyze::print_top(&out, 20, stdout.lock())?;
        }
        Command::Simulate(args) => {
            let cfg = SimulateConfig::resolve(&args)?;
            let report = with_threads(cfg.threads, || simulate::simulate(&cfg))??;
            simulate::print_report(&report, stdout.lock())?;
        }
        Command::Selfcheck(args) => {
            if args.threads == Some(0) {
                return Err(UsageError("threads must be at least 1".into()).into());
            }
            let ok = with_threads(args.threads, || {
                selfcheck::run_checks(&selfcheck::default_checks(), std::io::stdout().lock())
            })??;
            return Ok(if ok { 0 } else { 1 });
        }
    }
    Ok(0)
}

/// Parses `args` and runs the command. Returns the process exit code: 0 on
/// success, 2 for usage and configuration errors, 1 for anything else.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run_command(cli.command) {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
