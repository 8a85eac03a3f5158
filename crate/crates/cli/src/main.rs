mod commands;
mod datasets;
mod settings;

use std::process::ExitCode;

use clap::error::ErrorKind;
use tracing_subscriber::EnvFilter;

use settings::{CliError, CliResult, Settings};

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();

    let matches = match commands::cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(matches: &clap::ArgMatches) -> CliResult<()> {
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let mut cmd = commands::cli();
    cmd.build();
    let sub_cmd = cmd.find_subcommand(name).expect("matched subcommand exists");
    let settings = Settings::resolve(sub_cmd, sub)?;
    if let Some(threads) = settings.parse_opt::<usize>("threads")? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    commands::run(name, &settings)
}
