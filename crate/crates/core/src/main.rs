use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qsdlab::cli::{self, AnalysisConfig, EXIT_ERROR, EXIT_UNDECIDED};

#[derive(Parser)]
#[command(name = "qsdlab", version, about = "Quasi-stationary distributions of diffusions killed at 0")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the commands listed in a config file.
    Run { config: PathBuf },
    /// Run the identity suite for a config file.
    Validate { config: PathBuf },
    /// Classify a drift given on the command line.
    Classify {
        #[arg(long)]
        drift: String,
    },
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match args.cmd {
        Cmd::Run { config } => AnalysisConfig::load(&config).and_then(|c| cli::run(&c)).map(|o| {
            print!("{}", o.report);
            o.exit_code
        }),
        Cmd::Validate { config } => AnalysisConfig::load(&config).and_then(|c| cli::validate(&c)).map(|o| {
            print!("{}", o.report);
            o.exit_code
        }),
        Cmd::Classify { drift } => cli::classify_adhoc(&drift).map(|(text, undecided)| {
            print!("{text}");
            if undecided { EXIT_UNDECIDED } else { 0 }
        }),
    };
    match result {
        Ok(c) => code(c),
        Err(e) => {
            eprintln!("qsdlab: {e}");
            code(EXIT_ERROR)
        }
    }
}
