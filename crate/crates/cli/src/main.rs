use std::process::ExitCode;

use clap::Parser;
use fkvi_cli::{run, Cli, EXIT_IO};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_IO as u8);
        }
    }
    match run(&cli) {
        Ok(headline) => {
            if !cli.global.quiet {
                println!("{headline}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
