//! `etc` command-line front end.

mod commands;
mod pgm;

use std::process::ExitCode;

use clap::FromArgMatches;
use etc_core::EtcError;

use commands::Cli;

fn exit_code(e: &EtcError) -> u8 {
    match e {
        EtcError::Numeric { .. } => 2,
        _ => 1,
    }
}

fn report(code: u8, message: String) -> ExitCode {
    let obj = serde_json::json!({ "code": code, "message": message });
    eprintln!("{obj}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match commands::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return report(1, e.render().to_string().trim().to_string());
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return report(1, e.to_string()),
    };
    if let Err(e) = commands::init_threads() {
        return report(exit_code(&e), e.to_string());
    }
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(exit_code(&e), e.to_string()),
    }
}
