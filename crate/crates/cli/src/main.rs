use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::init();
    hstar_cli::run(hstar_cli::Cli::parse())
}
