use std::process::ExitCode;

use clap::Parser;
use failcast_cli::{execute, Cli, CliError};

fn run(cli: &Cli) -> anyhow::Result<()> {
    execute(cli)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}
