use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use locomt_cli::{run, with_thread_cap, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match with_thread_cap(|| run(&cli)).and_then(|r| r) {
        Ok(outcome) => {
            // A closed pipe on stdout is not an error; artifacts are on disk.
            let _ = writeln!(std::io::stdout().lock(), "{}", outcome.report);
            ExitCode::from(outcome.status.code())
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
