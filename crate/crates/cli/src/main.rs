//! `cascade-gate` command-line front-end.
//!
//! Every command exits with 0 on success, 2 on configuration errors, 3 on
//! data errors and 4 on internal errors. Failures print a single line of the
//! form `error[<class>]: <message>` on stderr.

mod commands;
mod options;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use cascade_gate::{Error, ErrorClass};

use crate::options::{Cli, Command};

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Internal => 4,
    }
}

fn class_name(class: ErrorClass) -> &'static str {
    match class {
        ErrorClass::Config => "config",
        ErrorClass::Data => "data",
        ErrorClass::Internal => "internal",
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fail(e: &Error) -> ExitCode {
    let class = e.class();
    let msg = match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    };
    eprintln!("error[{}]: {}", class_name(class), one_line(&msg));
    ExitCode::from(exit_code(class))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            eprintln!("error[config]: {}", one_line(first));
            return ExitCode::from(exit_code(ErrorClass::Config));
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return fail(&Error::Config("--jobs must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            return fail(&Error::Domain(format!("thread pool: {e}")));
        }
    }
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Corrupt(a) => commands::corrupt(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
