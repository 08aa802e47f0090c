//! Command-line entry point; see [`smoothlin::cli`] for the commands.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smoothlin::cli::{run, CliError, Command, RunConfig, EXIT_CONFIG};

#[derive(Parser)]
#[command(
    name = "smoothlin",
    version,
    about = "Smooth linearization of maps near hyperbolic fixed points"
)]
struct Args {
    /// Configuration file, or `builtin:<name>`.
    #[arg(long, global = true, default_value = "builtin:saddle")]
    config: String,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed override of the sampled checks.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Spectrum, conditions and Hölder exponents.
    Analyze,
    /// Stable foliation by the Lyapunov–Perron solver.
    Foliate,
    /// Build the conjugacy and export its transform chain.
    Linearize,
    /// Check an exported chain.
    Verify {
        /// Chain directory (default: `<out>/chain`).
        #[arg(long)]
        chain: Option<PathBuf>,
    },
    /// Hölder exponents of DΦ across a parameter family.
    Sharpness,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let informational = !e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if informational { 0 } else { EXIT_CONFIG as u8 });
        }
    };
    let command = match args.command {
        Sub::Analyze => Command::Analyze,
        Sub::Foliate => Command::Foliate,
        Sub::Linearize => Command::Linearize,
        Sub::Verify { chain } => Command::Verify { chain },
        Sub::Sharpness => Command::Sharpness,
    };
    let result = RunConfig::load(&args.config)
        .map_err(CliError::from)
        .and_then(|c| run(&command, &c, &args.out, args.seed));
    match result {
        Ok(outcome) => {
            print!("{}", outcome.report.render());
            ExitCode::from(outcome.status as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
