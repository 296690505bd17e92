use clap::error::ErrorKind;
use clap::Parser;

use ruleagent_cli::cli::{execute, Cli};

/// Exit codes: 0 success, 1 usage error, 2 runtime error.
fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };

    if let Err(err) = execute(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(2);
    }
}
