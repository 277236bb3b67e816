use std::process::ExitCode;

use clap::Parser;
use fovea::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = fovea::thread_pool().and_then(|pool| pool.install(|| run(cli)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
