use std::io;
use std::process::ExitCode;

use clap::Parser;

use dmtd_cli::{exit_code, run, Cli, Console};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mut out, mut err) = (io::stdout().lock(), io::stderr());
    let mut console = Console {
        out: &mut out,
        err: &mut err,
    };
    match run(cli, &mut console) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
