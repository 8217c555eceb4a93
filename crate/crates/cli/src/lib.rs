//! Scenario-driven runner for `ism-core`: TOML in, CSV tables and a JSON
//! manifest out.

pub mod config;
pub mod error;
pub mod output;
pub mod run;
pub mod seeds;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand as ClapSubcommand};

pub use config::{load_scenario, parse_scenario, LoadedScenario, Scenario};
pub use error::{Category, CliError};
pub use run::{run, RunManifest, RunOptions, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ism", version, about = "Idea-propagation simulation and copula risk experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: scenario `output_dir`, then $ISM_OUT_DIR, then ./ism-out]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, ClapSubcommand)]
enum Command {
    /// Fit free column parameters to trajectories or a pattern with ASA.
    FitIdea(Common),
    /// Langevin ensemble with per-epoch pattern overlap.
    Propagate(Common),
    /// Path-integral evolution of a grid density.
    Evolve(Common),
    /// Marginals, copula, sampled events and the portfolio risk report.
    Risk(Common),
    /// ASA importance sampling of a cost function.
    Sample(Common),
    /// Center background efficacies at a firing state.
    Center(Common),
}

/// Parse `args` (including the program name), run, and return the exit status.
/// Failures print one `ism-error category=… message=…` line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                eprint!("{e}");
                eprintln!("{}", CliError::usage(e.kind().to_string()).line());
                return Category::Usage.exit_code();
            }
            let _ = e.print();
            return 0;
        }
    };
    let (cmd, common) = match cli.command {
        Command::FitIdea(c) => (Subcommand::FitIdea, c),
        Command::Propagate(c) => (Subcommand::Propagate, c),
        Command::Evolve(c) => (Subcommand::Evolve, c),
        Command::Risk(c) => (Subcommand::Risk, c),
        Command::Sample(c) => (Subcommand::Sample, c),
        Command::Center(c) => (Subcommand::Center, c),
    };
    let opts = RunOptions { seed: common.seed, out: common.out, quiet: common.quiet };
    match load_scenario(&common.config).and_then(|l| run(cmd, &l, &opts)) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.category.exit_code()
        }
    }
}
