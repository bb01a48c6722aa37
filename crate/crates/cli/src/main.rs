use std::process::ExitCode;

use clap::Parser;
use gsmoe_cli::commands::{run, Cli};
use gsmoe_cli::config::split_overrides;

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("gsmoe: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gsmoe: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
