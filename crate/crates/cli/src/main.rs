use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use msds_cli::{emit_csv, parse_config, run, Cli, CliError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let config = parse_config(cli)?;
    if let Some(w) = config.theta_warning() {
        log::warn!("{w}");
    }
    let outcome = run(&config)?;
    if let Some(text) = emit_csv(&outcome.report, &config, config.output.as_deref())? {
        let _ = std::io::stdout().write_all(text.as_bytes());
    }
    for line in &outcome.summary {
        eprintln!("{line}");
    }
    Ok(())
}
