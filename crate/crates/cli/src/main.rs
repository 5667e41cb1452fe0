//! `recourse-kit`: command-line workflows over `recourse-core`.
//!
//! Exit codes: 0 when the check passes, 2 when it fails, 3 when the data
//! admit no feasible point where one is needed, 4 for usage and schema
//! errors.

mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RECOURSE_KIT_LOG", "warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors.
            return if e.use_stderr() { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };

    match commands::run(&cli.common, &cli.command) {
        Ok(report) => {
            let rendered = report.render(cli.common.format);
            match (&cli.common.out, cli.command_writes_out()) {
                (Some(path), false) => {
                    if let Err(e) = std::fs::write(path, &rendered) {
                        eprintln!("error: {}: {e}", path.display());
                        return ExitCode::from(4);
                    }
                }
                // The instance went to stdout, keep the report off it.
                (None, true) => eprint!("{rendered}"),
                _ => print!("{rendered}"),
            }
            if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.exit_code())
        }
    }
}
